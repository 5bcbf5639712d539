//! Supervised and preference training loops, AdamW and checkpoints.
//!
//! The batch for step `s` is drawn from `stream(seed, s)`, so a run is fully
//! determined by its seed, configuration and data, and resuming from a
//! checkpoint at step `s` continues the same sequence.

mod checkpoint;
mod optim;

use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, RngState, CHECKPOINT_VERSION};
pub use optim::{adamw_step, AdamWParams, OptimState};

use crate::alignment::{
    dm_loss, dpo_image_loss, implicit_preference_score, kto_image_loss, tdpo_loss, tkto_loss, AlignHyper,
    DiffusionBatch, ImagePairBatch, IpsItem, KtoBatch, TripletBatch,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::{
    make_schedule, sample, BoundDenoiser, Denoiser, DenoiserConfig, DiffusionSchedule, SamplerConfig,
};
use crate::editor::PreferenceTriplet;
use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::dataset::write_jsonl;
use crate::scenegen::{verify, Caption, Condition, Dataset, Image, PairedDataset, IMAGE_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Tdpo,
    Tkto,
    Dpo,
    Kto,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown stage {s:?}, expected sft, tdpo, tkto, dpo or kto")))
    }

    /// Whether the stage trains on caption triplets (as opposed to image pairs).
    pub fn uses_triplets(self) -> bool {
        matches!(self, Stage::Tdpo | Stage::Tkto)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Sft => "sft",
            Stage::Tdpo => "tdpo",
            Stage::Tkto => "tkto",
            Stage::Dpo => "dpo",
            Stage::Kto => "kto",
        };
        f.write_str(s)
    }
}

pub const DEFAULT_SFT_LR: f64 = 1e-3;
/// Default for the pairwise stages (TDPO, DPO).
pub const DEFAULT_PAIR_LR: f64 = 3e-4;
/// Default for the per-item utility stages (TKTO, KTO).
pub const DEFAULT_KTO_LR: f64 = 3e-5;
pub const DEFAULT_SFT_STEPS: usize = 4000;
pub const DEFAULT_ALIGN_STEPS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// `None` selects the stage default.
    pub lr: Option<f64>,
    pub batch_size: usize,
    /// `None` selects the stage default.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub cond_dropout: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub hyper: AlignHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Sft,
            lr: None,
            batch_size: 16,
            max_steps: None,
            seed: 0,
            cond_dropout: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            eval_every: 500,
            hyper: AlignHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.stage {
            Stage::Sft => DEFAULT_SFT_LR,
            Stage::Tdpo | Stage::Dpo => DEFAULT_PAIR_LR,
            Stage::Tkto | Stage::Kto => DEFAULT_KTO_LR,
        })
    }

    pub fn effective_max_steps(&self) -> usize {
        self.max_steps.unwrap_or(if self.stage == Stage::Sft {
            DEFAULT_SFT_STEPS
        } else {
            DEFAULT_ALIGN_STEPS
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.effective_lr();
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!(
                "train.cond_dropout must be in [0, 1), got {}",
                self.cond_dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config(
                "train adam betas must be in [0, 1) and eps positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        self.hyper.validate()
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.effective_lr(),
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One run-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align_score: Option<f64>,
}

pub fn write_run_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    write_jsonl(path, log)
}

/// Held-out triplets scored at each evaluation point.
pub struct IpsProbe<'a> {
    pub items: Vec<IpsItem<'a>>,
    pub t_frac: f64,
    pub n_noise: usize,
    pub seed: u64,
}

/// Held-out material evaluated every `eval_every` steps. The best checkpoint
/// is the one with the highest mean verifier score on `prompts`.
pub struct HeldOut<'a> {
    pub prompts: Vec<Caption>,
    pub sampler: SamplerConfig,
    pub ips: Option<IpsProbe<'a>>,
}

impl HeldOut<'_> {
    fn evaluate(&self, model: &Denoiser, schedule: &DiffusionSchedule) -> Result<(Option<f64>, Option<f64>)> {
        let align = if self.prompts.is_empty() {
            None
        } else {
            let images = sample(model, schedule, &self.prompts, &self.sampler)?;
            let total: f64 = images
                .iter()
                .zip(&self.prompts)
                .map(|(img, c)| verify(img, c).alignment_score())
                .sum();
            Some(total / self.prompts.len() as f64)
        };
        let ips = match &self.ips {
            Some(p) if !p.items.is_empty() => {
                Some(implicit_preference_score(model, schedule, &p.items, p.t_frac, p.n_noise, p.seed)?.mean)
            }
            _ => None,
        };
        Ok((align, ips))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_step: u64,
    /// Checkpoints at every evaluation point after the start step.
    pub snapshots: Vec<Checkpoint>,
    pub log: Vec<LogRecord>,
    /// Training items that used the null condition.
    pub null_conditions: u64,
}

/// Training data for the preference stages.
pub enum AlignData<'a> {
    Triplets {
        images: &'a [Image],
        triplets: &'a [PreferenceTriplet],
    },
    Pairs(&'a PairedDataset),
}

impl AlignData<'_> {
    fn kind(&self) -> &'static str {
        match self {
            AlignData::Triplets { .. } => "caption triplets",
            AlignData::Pairs(_) => "image pairs",
        }
    }

    fn len(&self) -> usize {
        match self {
            AlignData::Triplets { triplets, .. } => triplets.len(),
            AlignData::Pairs(p) => p.len(),
        }
    }
}

fn tensor_rows(rows: &[&[f32]]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(rows.len() * IMAGE_LEN);
    for r in rows {
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(vec![rows.len(), IMAGE_LEN], data)?)
}

/// The SFT batch for `step`, with the number of null-conditioned items.
pub fn sft_batch(
    dataset: &Dataset,
    captions: &[Caption],
    cfg: &TrainConfig,
    t_max: usize,
    step: u64,
) -> Result<(DiffusionBatch<f32>, u64)> {
    let mut r = rng::stream(cfg.seed, step);
    let (mut x0, mut eps, mut t, mut conds) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut nulls = 0;
    for _ in 0..cfg.batch_size {
        let idx = r.random_range(0..dataset.len());
        t.push(r.random_range(1..=t_max));
        let drop = r.random::<f64>() < cfg.cond_dropout;
        if drop {
            nulls += 1;
            conds.push(Condition::Null);
        } else {
            conds.push(Condition::Caption(captions[idx]));
        }
        x0.push(dataset.images[idx].data());
        eps.extend(rng::normal_vec(&mut r, IMAGE_LEN));
    }
    let eps = Tensor::new(vec![cfg.batch_size, IMAGE_LEN], eps)?;
    Ok((
        DiffusionBatch {
            x0: tensor_rows(&x0)?,
            eps,
            t,
            conds,
        },
        nulls,
    ))
}

/// Loss for one step together with its null-condition count.
type StepLoss<'t> = (Var<'t, f32>, u64);

struct LoopState {
    denoiser: Denoiser,
    optim: OptimState,
    start: u64,
}

fn run_loop<F>(
    state: LoopState,
    reference: Option<&Denoiser>,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
    held_out: Option<&HeldOut<'_>>,
    batch_loss: F,
) -> Result<TrainOutcome>
where
    F: for<'t> Fn(
        &'t Tape<f32>,
        &BoundDenoiser<'_, 't, f32>,
        Option<&BoundDenoiser<'_, 't, f32>>,
        u64,
    ) -> Result<StepLoss<'t>>,
{
    let LoopState {
        mut denoiser,
        mut optim,
        start,
    } = state;
    let max = cfg.effective_max_steps() as u64;
    if start > max {
        return Err(Error::Config(format!(
            "checkpoint step {start} is past train.max_steps {max}"
        )));
    }
    let hp = cfg.adamw();
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, u64, Checkpoint)> = None;
    let mut nulls_total = 0;
    let make_ck = |d: &Denoiser, o: &OptimState, step: u64| {
        Checkpoint::new(cfg.clone(), d, o.clone(), RngState { seed: cfg.seed, step })
    };
    for step in start..=max {
        let eval_point = step % cfg.eval_every as u64 == 0 || step == max;
        let tape = Tape::new();
        let strict = tape.is_strict();
        let theta = BoundDenoiser::new(&denoiser.config, denoiser.t_max, &denoiser.params, &tape, step < max)?;
        let frozen = match reference {
            Some(r) => Some(BoundDenoiser::new(&r.config, r.t_max, &r.params, &tape, false)?),
            None => None,
        };
        let (loss, nulls) = batch_loss(&tape, &theta, frozen.as_ref(), step)?;
        let loss_value = loss.item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite {} loss at step {step}", cfg.stage)));
        }
        if eval_point {
            let (align_score, ips) = match held_out {
                Some(h) => h.evaluate(&denoiser, schedule)?,
                None => (None, None),
            };
            log.push(LogRecord {
                step,
                loss: loss_value,
                ips,
                align_score,
            });
            if step > start || step == max {
                let ck = make_ck(&denoiser, &optim, step);
                let score = align_score.unwrap_or(f64::NEG_INFINITY);
                if best.as_ref().is_none_or(|b| score > b.0) {
                    best = Some((score, step, ck.clone()));
                }
                snapshots.push(ck);
            }
        }
        if step == max {
            break;
        }
        nulls_total += nulls;
        let mut grads = tape.backward(loss)?;
        denoiser.params.accumulate_grads(theta.params(), &mut grads);
        drop(theta);
        let g = denoiser.params.take_grads();
        adamw_step(&mut denoiser.params, &g, &mut optim, &hp, strict)?;
    }
    let last = snapshots.last().cloned().expect("final step is an evaluation point");
    let (_, best_step, best) = best.expect("final step is an evaluation point");
    Ok(TrainOutcome {
        last,
        best,
        best_step,
        snapshots,
        log,
        null_conditions: nulls_total,
    })
}

/// Minimize the diffusion loss with condition dropout. `init` resumes from a
/// checkpoint (parameters, optimizer state and step).
pub fn train_sft(
    dataset: &Dataset,
    model: &DenoiserConfig,
    t_max: usize,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    held_out: Option<&HeldOut<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Sft {
        return Err(Error::Config(format!("train_sft called with stage {}", cfg.stage)));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("SFT needs a non-empty dataset".into()));
    }
    let schedule = make_schedule(t_max)?;
    let captions = dataset.captions()?;
    let state = match init {
        Some(ck) => {
            let d = ck.denoiser();
            d.validate()?;
            if d.config != *model || d.t_max != t_max {
                return Err(Error::Config(
                    "resume checkpoint model does not match the configured model".into(),
                ));
            }
            LoopState {
                denoiser: d,
                optim: ck.optim.clone(),
                start: ck.header.step,
            }
        }
        None => {
            let d = Denoiser::new(model.clone(), t_max, cfg.seed)?;
            let optim = OptimState::zeros_like(&d.params);
            LoopState {
                denoiser: d,
                optim,
                start: 0,
            }
        }
    };
    run_loop(state, None, cfg, &schedule, held_out, |tape, theta, _, step| {
        let (batch, nulls) = sft_batch(dataset, &captions, cfg, t_max, step)?;
        Ok((dm_loss(tape, theta, &schedule, &batch)?, nulls))
    })
}

fn draw_noise(r: &mut rng::Rng, b: usize) -> Result<Tensor<f32>> {
    Ok(Tensor::new(
        vec![b, IMAGE_LEN],
        (0..b).flat_map(|_| rng::normal_vec(r, IMAGE_LEN)).collect(),
    )?)
}

/// Fine-tune a copy of `reference` with the stage's preference loss while
/// the reference stays frozen.
pub fn train_align(
    data: &AlignData<'_>,
    reference: &Checkpoint,
    cfg: &TrainConfig,
    held_out: Option<&HeldOut<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stage = cfg.stage;
    match (stage, data) {
        (Stage::Sft, _) => return Err(Error::Config("train_align needs a preference stage, got sft".into())),
        (Stage::Tdpo | Stage::Tkto, AlignData::Triplets { .. }) | (Stage::Dpo | Stage::Kto, AlignData::Pairs(_)) => {}
        _ => {
            let needed = if stage.uses_triplets() {
                "caption triplets"
            } else {
                "image pairs"
            };
            return Err(Error::Config(format!(
                "stage {stage} trains on {needed}, but the data holds {}",
                data.kind()
            )));
        }
    }
    if data.len() == 0 {
        return Err(Error::InvalidArgument(
            "preference training needs a non-empty dataset".into(),
        ));
    }
    if let AlignData::Triplets { images, triplets } = data {
        if let Some(t) = triplets.iter().find(|t| t.image_index >= images.len()) {
            return Err(Error::InvalidArgument(format!(
                "triplet references image {} of {}",
                t.image_index,
                images.len()
            )));
        }
    }
    let ref_model = reference.denoiser();
    ref_model.validate()?;
    let schedule = make_schedule(ref_model.t_max)?;
    let t_max = ref_model.t_max;
    let state = LoopState {
        optim: OptimState::zeros_like(&ref_model.params),
        denoiser: ref_model.clone(),
        start: 0,
    };
    let b = cfg.batch_size;
    let hyper = &cfg.hyper;
    run_loop(
        state,
        Some(&ref_model),
        cfg,
        &schedule,
        held_out,
        |tape, theta, frozen, step| {
            let frozen = frozen.expect("reference is bound");
            let mut r = rng::stream(cfg.seed, step);
            let loss = match data {
                AlignData::Triplets { images, triplets } => {
                    let picks: Vec<&PreferenceTriplet> =
                        (0..b).map(|_| &triplets[r.random_range(0..triplets.len())]).collect();
                    let t: Vec<usize> = (0..b).map(|_| r.random_range(1..=t_max)).collect();
                    let x0 = tensor_rows(&picks.iter().map(|p| images[p.image_index].data()).collect::<Vec<_>>())?;
                    let eps = draw_noise(&mut r, b)?;
                    if stage == Stage::Tdpo {
                        let eps_l = if hyper.independent_noise {
                            Some(draw_noise(&mut r, b)?)
                        } else {
                            None
                        };
                        let batch = TripletBatch {
                            x0,
                            eps,
                            eps_l,
                            t,
                            c_w: picks.iter().map(|p| p.c_w).collect(),
                            c_l: picks.iter().map(|p| p.c_l).collect(),
                        };
                        tdpo_loss(tape, theta, frozen, &schedule, &batch, hyper)?
                    } else {
                        // Item i pairs with item i ^ 1: same image, time and noise,
                        // matched caption at even positions.
                        let pair = |i: usize| i & !1;
                        let rows: Vec<&[f32]> = (0..b)
                            .map(|i| x0.data()[pair(i) * IMAGE_LEN..][..IMAGE_LEN].as_ref())
                            .collect();
                        let erows: Vec<&[f32]> = (0..b)
                            .map(|i| eps.data()[pair(i) * IMAGE_LEN..][..IMAGE_LEN].as_ref())
                            .collect();
                        let batch = KtoBatch {
                            x0: tensor_rows(&rows)?,
                            eps: tensor_rows(&erows)?,
                            t: (0..b).map(|i| t[pair(i)]).collect(),
                            conds: (0..b)
                                .map(|i| {
                                    if i % 2 == 0 {
                                        picks[pair(i)].c_w
                                    } else {
                                        picks[pair(i)].c_l
                                    }
                                })
                                .collect(),
                            omega: (0..b).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect(),
                        };
                        tkto_loss(tape, theta, frozen, &schedule, &batch, hyper)?
                    }
                }
                AlignData::Pairs(pairs) => {
                    let picks: Vec<usize> = (0..b).map(|_| r.random_range(0..pairs.len())).collect();
                    let t: Vec<usize> = (0..b).map(|_| r.random_range(1..=t_max)).collect();
                    let captions = picks
                        .iter()
                        .map(|&i| pairs.records[i].caption())
                        .collect::<Result<Vec<_>>>()?;
                    let eps_w = draw_noise(&mut r, b)?;
                    let eps_l = draw_noise(&mut r, b)?;
                    let winners: Vec<&[f32]> = picks.iter().map(|&i| pairs.winners[i].data()).collect();
                    let losers: Vec<&[f32]> = picks.iter().map(|&i| pairs.losers[i].data()).collect();
                    if stage == Stage::Dpo {
                        let batch = ImagePairBatch {
                            x0_w: tensor_rows(&winners)?,
                            x0_l: tensor_rows(&losers)?,
                            eps_w,
                            eps_l,
                            t,
                            conds: captions,
                        };
                        dpo_image_loss(tape, theta, frozen, &schedule, &batch, hyper)?
                    } else {
                        // Even positions hold preferred images, odd positions rejected ones.
                        let pair = |i: usize| i & !1;
                        let rows: Vec<&[f32]> = (0..b)
                            .map(|i| if i % 2 == 0 { winners[pair(i)] } else { losers[pair(i)] })
                            .collect();
                        let erows: Vec<&[f32]> = (0..b)
                            .map(|i| {
                                let src = if i % 2 == 0 { &eps_w } else { &eps_l };
                                &src.data()[pair(i) * IMAGE_LEN..(pair(i) + 1) * IMAGE_LEN]
                            })
                            .collect();
                        let batch = KtoBatch {
                            x0: tensor_rows(&rows)?,
                            eps: tensor_rows(&erows)?,
                            t: (0..b).map(|i| t[pair(i)]).collect(),
                            conds: (0..b).map(|i| captions[pair(i)]).collect(),
                            omega: (0..b).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect(),
                        };
                        kto_image_loss(tape, theta, frozen, &schedule, &batch, hyper)?
                    }
                }
            };
            Ok((loss, 0))
        },
    )
}
