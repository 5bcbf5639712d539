//! Sampling-based evaluation: per-prompt verifier scores, win rates between
//! two image sources, the implicit preference score report, and the
//! correlation between preference score and alignment across checkpoints.
//!
//! Every report serializes deterministically, so reruns with the same
//! inputs reproduce the same JSON and CSV bytes.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::alignment::{implicit_preference_score, IpsItem};
use crate::diffusion::{make_schedule, sample, Denoiser, DiffusionSchedule, NoisePredictor, SamplerConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::{render, verify, Caption, Image, IMAGE_LEN};
use crate::trainer::Checkpoint;

/// Anything that turns prompts into images.
pub trait ImageSource: Sync {
    fn images(&self, prompts: &[Caption], sampler: &SamplerConfig) -> Result<Vec<Image>>;

    /// Identifier recorded in report provenance.
    fn identity(&self) -> String;
}

/// A trained denoiser sampled with the configured sampler.
pub struct ModelSource {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub identity: String,
}

impl ModelSource {
    pub fn new(denoiser: Denoiser, identity: impl Into<String>) -> Result<Self> {
        denoiser.validate()?;
        let schedule = make_schedule(denoiser.t_max)?;
        Ok(Self {
            denoiser,
            schedule,
            identity: identity.into(),
        })
    }

    /// Identified by the checkpoint's content hash.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.denoiser(), ckpt.hash()?)
    }
}

impl ImageSource for ModelSource {
    fn images(&self, prompts: &[Caption], sampler: &SamplerConfig) -> Result<Vec<Image>> {
        sample(&self.denoiser, &self.schedule, prompts, sampler)
    }

    fn identity(&self) -> String {
        self.identity.clone()
    }
}

/// Test hook: the clean render of each prompt.
pub struct OracleSource;

impl ImageSource for OracleSource {
    fn images(&self, prompts: &[Caption], _sampler: &SamplerConfig) -> Result<Vec<Image>> {
        prompts.par_iter().map(|p| render(&p.spec_of()?)).collect()
    }

    fn identity(&self) -> String {
        "oracle".into()
    }
}

/// Test hook: uniform noise in `[-1, 1]`, seeded per prompt index.
pub struct NoiseSource;

impl ImageSource for NoiseSource {
    fn images(&self, prompts: &[Caption], sampler: &SamplerConfig) -> Result<Vec<Image>> {
        use rand::Rng;
        (0..prompts.len())
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(sampler.seed, i as u64);
                Image::from_data((0..IMAGE_LEN).map(|_| r.random_range(-1.0f32..=1.0)).collect())
            })
            .collect()
    }

    fn identity(&self) -> String {
        "noise".into()
    }
}

/// Verifier scores of one source on a prompt set.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEval {
    pub source: String,
    pub sampler: SamplerConfig,
    pub prompts: Vec<Caption>,
    pub scores: Vec<f64>,
    pub mean: f64,
}

fn check_prompts(prompts: &[Caption]) -> Result<()> {
    for (i, p) in prompts.iter().enumerate() {
        p.spec_of()
            .map_err(|e| Error::InvalidArgument(format!("prompt {i}: {e}")))?;
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// One image per prompt, scored against that prompt.
pub fn eval_alignment(source: &dyn ImageSource, prompts: &[Caption], sampler: &SamplerConfig) -> Result<AlignmentEval> {
    check_prompts(prompts)?;
    let images = source.images(prompts, sampler)?;
    let scores: Vec<f64> = images
        .par_iter()
        .zip(prompts)
        .map(|(im, p)| verify(im, p).alignment_score())
        .collect();
    Ok(AlignmentEval {
        source: source.identity(),
        sampler: sampler.clone(),
        prompts: prompts.to_vec(),
        mean: mean(&scores),
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
    Tie,
}

impl Winner {
    fn credit(self) -> f64 {
        match self {
            Winner::A => 1.0,
            Winner::Tie => 0.5,
            Winner::B => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: Caption,
    pub alignment_score_a: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_score_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner: Option<Winner>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_score_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub win_rate: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_b: Option<String>,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<PromptRecord>,
    pub aggregates: Aggregates,
    pub provenance: Provenance,
}

fn aggregate(records: &[PromptRecord]) -> Aggregates {
    let a: Vec<f64> = records.iter().map(|r| r.alignment_score_a).collect();
    let b: Option<Vec<f64>> = records.iter().map(|r| r.alignment_score_b).collect();
    let win_rate = if records.is_empty() {
        None
    } else {
        let credits: Option<Vec<f64>> = records.iter().map(|r| r.winner.map(Winner::credit)).collect();
        credits.map(|c| mean(&c))
    };
    Aggregates {
        mean_score: mean(&a),
        mean_score_b: b.filter(|_| !records.is_empty()).map(|b| mean(&b)),
        win_rate,
        n: records.len(),
    }
}

impl EvalReport {
    /// Report for a single source, without a comparison.
    pub fn single(eval: &AlignmentEval) -> Self {
        let records: Vec<PromptRecord> = eval
            .prompts
            .iter()
            .zip(&eval.scores)
            .map(|(p, s)| PromptRecord {
                prompt: *p,
                alignment_score_a: *s,
                alignment_score_b: None,
                winner: None,
            })
            .collect();
        Self {
            aggregates: aggregate(&records),
            records,
            provenance: Provenance {
                checkpoint_a: eval.source.clone(),
                checkpoint_b: None,
                sampler: eval.sampler.clone(),
                seed: eval.sampler.seed,
            },
        }
    }

    /// Head-to-head comparison. Both sides must cover the same prompts in
    /// the same order under the same sampler.
    pub fn compare(a: &AlignmentEval, b: &AlignmentEval) -> Result<Self> {
        if a.prompts != b.prompts {
            let first = a.prompts.iter().zip(&b.prompts).position(|(x, y)| x != y);
            return Err(Error::InvalidArgument(match first {
                Some(i) => format!("prompt sets differ at index {i}"),
                None => format!("prompt sets differ in size: {} vs {}", a.prompts.len(), b.prompts.len()),
            }));
        }
        if a.sampler != b.sampler {
            return Err(Error::InvalidArgument(
                "both sides must use the same sampler config".into(),
            ));
        }
        let records: Vec<PromptRecord> = a
            .prompts
            .iter()
            .zip(a.scores.iter().zip(&b.scores))
            .map(|(p, (&sa, &sb))| PromptRecord {
                prompt: *p,
                alignment_score_a: sa,
                alignment_score_b: Some(sb),
                winner: Some(if sa > sb {
                    Winner::A
                } else if sb > sa {
                    Winner::B
                } else {
                    Winner::Tie
                }),
            })
            .collect();
        Ok(Self {
            aggregates: aggregate(&records),
            records,
            provenance: Provenance {
                checkpoint_a: a.source.clone(),
                checkpoint_b: Some(b.source.clone()),
                sampler: a.sampler.clone(),
                seed: a.sampler.seed,
            },
        })
    }

    /// Whether the aggregates recompute exactly from the records.
    pub fn is_consistent(&self) -> bool {
        aggregate(&self.records) == self.aggregates
    }

    pub fn win_rate(&self) -> Option<f64> {
        self.aggregates.win_rate
    }

    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    /// One row per prompt.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let row = |w: &mut csv::Writer<Vec<u8>>, fields: &[String]| w.write_record(fields).map_err(csv_err);
        row(
            &mut w,
            &["index", "prompt", "alignment_score_a", "alignment_score_b", "winner"].map(String::from),
        )?;
        for (i, r) in self.records.iter().enumerate() {
            let winner = match r.winner {
                Some(Winner::A) => "a",
                Some(Winner::B) => "b",
                Some(Winner::Tie) => "tie",
                None => "",
            };
            row(
                &mut w,
                &[
                    i.to_string(),
                    r.prompt.text(),
                    r.alignment_score_a.to_string(),
                    r.alignment_score_b.map(|s| s.to_string()).unwrap_or_default(),
                    winner.to_string(),
                ],
            )?;
        }
        csv_string(w)
    }
}

/// Sample both sources on `prompts` and compare them.
pub fn win_rate(
    a: &dyn ImageSource,
    b: &dyn ImageSource,
    prompts: &[Caption],
    sampler: &SamplerConfig,
) -> Result<EvalReport> {
    let ea = eval_alignment(a, prompts, sampler)?;
    let eb = eval_alignment(b, prompts, sampler)?;
    EvalReport::compare(&ea, &eb)
}

/// Fixed-timestep protocol of the implicit preference score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpsProtocol {
    pub t_frac: f64,
    pub n_noise: usize,
    pub seed: u64,
}

impl Default for IpsProtocol {
    fn default() -> Self {
        Self {
            t_frac: 0.5,
            n_noise: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpsReport {
    pub checkpoint: String,
    pub protocol: IpsProtocol,
    pub t: usize,
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
    pub scores: Vec<f64>,
}

/// Standard error of the mean with the unbiased variance; zero for fewer
/// than two values.
pub fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

impl IpsReport {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "score"]).map_err(csv_err)?;
        for (i, s) in self.scores.iter().enumerate() {
            w.write_record([i.to_string(), s.to_string()]).map_err(csv_err)?;
        }
        csv_string(w)
    }
}

pub fn ips_report<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    items: &[IpsItem<'_>],
    protocol: &IpsProtocol,
    checkpoint: impl Into<String>,
) -> Result<IpsReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("ips_report needs at least one triplet".into()));
    }
    let s = implicit_preference_score(model, schedule, items, protocol.t_frac, protocol.n_noise, protocol.seed)?;
    Ok(IpsReport {
        checkpoint: checkpoint.into(),
        protocol: protocol.clone(),
        t: s.t,
        n: s.scores.len(),
        mean: s.mean,
        std_error: standard_error(&s.scores),
        scores: s.scores,
    })
}

/// Pearson correlation, or [`Pearson::Degenerate`] when either side has
/// zero variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pearson {
    Value(f64),
    Degenerate,
}

impl Pearson {
    pub fn value(self) -> Option<f64> {
        match self {
            Pearson::Value(r) => Some(r),
            Pearson::Degenerate => None,
        }
    }
}

impl std::fmt::Display for Pearson {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pearson::Value(r) => write!(f, "{r:.4}"),
            Pearson::Degenerate => f.write_str("degenerate"),
        }
    }
}

impl Serialize for Pearson {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Pearson::Value(r) => s.serialize_f64(*r),
            Pearson::Degenerate => s.serialize_str("degenerate"),
        }
    }
}

impl<'de> Deserialize<'de> for Pearson {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) => Ok(Pearson::Value(r)),
            Raw::Str(s) if s == "degenerate" => Ok(Pearson::Degenerate),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"degenerate\", got {s:?}"
            ))),
        }
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Pearson {
    assert_eq!(xs.len(), ys.len());
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Pearson::Degenerate;
    }
    Pearson::Value((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub label: String,
    pub ips_mean: f64,
    pub align_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub points: Vec<CorrelationPoint>,
    pub pearson_r: Pearson,
    pub n_checkpoints: usize,
}

pub const MIN_CORRELATION_CHECKPOINTS: usize = 3;

impl CorrelationReport {
    pub fn from_points(points: Vec<CorrelationPoint>) -> Result<Self> {
        if points.len() < MIN_CORRELATION_CHECKPOINTS {
            return Err(Error::InvalidArgument(format!(
                "correlation needs at least {MIN_CORRELATION_CHECKPOINTS} checkpoints, got {}",
                points.len()
            )));
        }
        let xs: Vec<f64> = points.iter().map(|p| p.ips_mean).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.align_mean).collect();
        Ok(Self {
            pearson_r: pearson(&xs, &ys),
            n_checkpoints: points.len(),
            points,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    /// The scatter, one row per checkpoint.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "ips_mean", "align_mean"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.label.clone(), p.ips_mean.to_string(), p.align_mean.to_string()])
                .map_err(csv_err)?;
        }
        csv_string(w)
    }
}

/// IPS mean and alignment mean for each labelled model, then Pearson r.
pub fn correlation_report(
    models: &[(String, &ModelSource)],
    prompts: &[Caption],
    items: &[IpsItem<'_>],
    sampler: &SamplerConfig,
    protocol: &IpsProtocol,
) -> Result<CorrelationReport> {
    if models.len() < MIN_CORRELATION_CHECKPOINTS {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least {MIN_CORRELATION_CHECKPOINTS} checkpoints, got {}",
            models.len()
        )));
    }
    let mut points = Vec::with_capacity(models.len());
    for (label, m) in models {
        let ips = ips_report(&m.denoiser, &m.schedule, items, protocol, m.identity.clone())?;
        let align = eval_alignment(*m, prompts, sampler)?;
        points.push(CorrelationPoint {
            label: label.clone(),
            ips_mean: ips.mean,
            align_mean: align.mean,
        });
    }
    CorrelationReport::from_points(points)
}

/// One method row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub align_mean: Option<f64>,
    pub win_rate: Option<f64>,
    pub ips_mean: Option<f64>,
}

/// Markdown table with methods as rows and metrics as columns.
pub fn summary_markdown(rows: &[SummaryRow], baseline: &str) -> String {
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| Method | Alignment score | Win rate vs {baseline} | Implicit preference score |"
    );
    let _ = writeln!(out, "|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.method,
            cell(r.align_mean),
            cell(r.win_rate),
            cell(r.ips_mean)
        );
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s =
        serde_json::to_string_pretty(v).map_err(|e| Error::InvalidArgument(format!("serialize report: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("write csv: {e}"))
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("write csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("write csv: {e}")))
}

/// Write `contents` to `path`, naming the file on failure.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
