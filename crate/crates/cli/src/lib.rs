//! The `tpo` pipeline: data generation, caption perturbation, training,
//! sampling and evaluation as subcommands sharing one JSON config.
//!
//! Settings resolve as command-line flag, then config file, then default.
//! The effective config is written as `config.json` into every output
//! directory.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tpo_core::alignment::IpsItem;
use tpo_core::editor::{
    build_image_pair_dataset, build_text_pref_dataset, read_triplets, write_triplets, EditPrinciple, PreferenceTriplet,
    TRIPLETS_FILE,
};
use tpo_core::error::ErrorClass;
use tpo_core::evaluator::{
    eval_alignment, ips_report, summary_markdown, write_text, CorrelationPoint, CorrelationReport, EvalReport,
    ModelSource, SummaryRow,
};
use tpo_core::scenegen::{read_meta, write_images, write_meta, Caption, Dataset, MetaRecord, PairedDataset};
use tpo_core::trainer::{
    train_align, train_sft, write_run_log, AlignData, Checkpoint, HeldOut, IpsProbe, Stage, TrainOutcome,
};
use tpo_core::{Error, Result};

use config::RunConfig;

pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

#[derive(Parser, Debug)]
#[command(
    name = "tpo",
    version,
    about = "Text preference optimization on a procedural shape world"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of the subcommand's primary random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic image-caption dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Build mismatched-caption triplets for a dataset.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        /// Edit budget.
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated principles: content, attribute, spatial, contextual.
        #[arg(long, value_delimiter = ',')]
        principles: Option<Vec<String>>,
        #[command(flatten)]
        common: Common,
    },
    /// Build an image-pair dataset by rendering the mismatched captions.
    Pair {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training on matched pairs.
    TrainSft {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Preference fine-tuning from a reference checkpoint.
    TrainAlign {
        #[arg(long)]
        stage: String,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Dataset directory, or a paired dataset for dpo/kto.
        #[arg(long)]
        data: PathBuf,
        /// Triplets file or directory for tdpo/tkto.
        #[arg(long)]
        triplets: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample images for prompts.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON lines of 7-token captions; defaults to the held-out prompts.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Verifier alignment of one checkpoint on the held-out prompts.
    EvalAlign {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Win rate of checkpoint `a` against checkpoint `b`.
    EvalWinrate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Implicit preference score on held-out triplets.
    EvalIps {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Summary table and correlation across labelled checkpoints.
    Report {
        /// `label=path`, repeatable.
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<String>,
        /// Label the win rates are computed against; defaults to the first.
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Perturb { common, .. }
            | Command::Pair { common, .. }
            | Command::TrainSft { common, .. }
            | Command::TrainAlign { common, .. }
            | Command::Sample { common, .. }
            | Command::EvalAlign { common, .. }
            | Command::EvalWinrate { common, .. }
            | Command::EvalIps { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Internal => 1,
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if std::env::var("TPO_STRICT").is_ok_and(|v| v == "1") {
        tpo_core::autodiff::set_strict_default(true);
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn required_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("missing required flag --out".into()))
}

/// Apply the flags that override config fields, then validate.
fn resolve(command: &Command) -> Result<RunConfig> {
    let common = command.common();
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed;
    match command {
        Command::GenData { n, .. } => {
            if let Some(n) = n {
                cfg.data.n = *n;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
        }
        Command::Perturb { k, principles, .. } => {
            if let Some(k) = k {
                cfg.edit.k = *k;
            }
            if let Some(p) = principles {
                cfg.edit.allowed = p.iter().map(|s| EditPrinciple::parse(s)).collect::<Result<_>>()?;
            }
            if let Some(s) = seed {
                cfg.edit.seed = s;
            }
        }
        Command::Pair { k, .. } => {
            if let Some(k) = k {
                cfg.edit.k = *k;
            }
            if let Some(s) = seed {
                cfg.edit.seed = s;
            }
        }
        Command::TrainSft { steps, .. } => {
            cfg.train.stage = Stage::Sft;
            if let Some(n) = steps {
                cfg.train.max_steps = Some(*n);
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
        }
        Command::TrainAlign { stage, steps, .. } => {
            cfg.train.stage = Stage::parse(stage)?;
            if cfg.train.stage == Stage::Sft {
                return Err(Error::Config("train-align needs --stage tdpo, tkto, dpo or kto".into()));
            }
            if let Some(n) = steps {
                cfg.train.max_steps = Some(*n);
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
        }
        Command::Sample { .. } | Command::EvalAlign { .. } | Command::EvalWinrate { .. } => {
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
        }
        Command::EvalIps { .. } => {
            if let Some(s) = seed {
                cfg.eval.ips.seed = s;
            }
        }
        Command::Report { .. } => {
            if let Some(s) = seed {
                cfg.sampler.seed = s;
                cfg.eval.ips.seed = s;
            }
        }
    }
    cfg.train.lr = Some(cfg.train.effective_lr());
    cfg.train.max_steps = Some(cfg.train.effective_max_steps());
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(command: Command) -> Result<()> {
    let cfg = resolve(&command)?;
    let common = command.common().clone();
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // A pool that already exists (tests running in-process) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let out = required_out(&common)?.to_path_buf();
    cfg.echo(&out)?;
    match command {
        Command::GenData { .. } => Dataset::generate(cfg.data.n, cfg.data.seed)?.save(&out),
        Command::Perturb { data, .. } => {
            let records = read_meta(&data.join(tpo_core::scenegen::META_FILE))?;
            let triplets = build_text_pref_dataset(&records, &cfg.edit)?;
            write_triplets(&out.join(TRIPLETS_FILE), &triplets)
        }
        Command::Pair { data, .. } => build_image_pair_dataset(&Dataset::load(&data)?, &cfg.edit)?.save(&out),
        Command::TrainSft { data, resume, .. } => {
            let dataset = Dataset::load(&data)?;
            let init = resume.as_deref().map(Checkpoint::load).transpose()?;
            let set = HeldOutSet::build(&cfg, cfg.eval.select_prompts, cfg.eval.select_seed)?;
            let held = set.held_out(&cfg, cfg.eval.select_prompts);
            let outcome = train_sft(
                &dataset,
                &cfg.model,
                cfg.schedule.t_max,
                &cfg.train,
                init.as_ref(),
                Some(&held),
            )?;
            save_outcome(&out, &outcome)
        }
        Command::TrainAlign {
            reference,
            data,
            triplets,
            ..
        } => {
            let reference = reference.ok_or_else(|| Error::Config("train-align requires --ref <checkpoint>".into()))?;
            let reference = Checkpoint::load(&reference)?;
            let set = HeldOutSet::build(&cfg, cfg.eval.select_prompts, cfg.eval.select_seed)?;
            let held = set.held_out(&cfg, cfg.eval.select_prompts);
            let outcome = if cfg.train.stage.uses_triplets() {
                let dataset = Dataset::load(&data)?;
                let path =
                    triplets.ok_or_else(|| Error::Config(format!("stage {} requires --triplets", cfg.train.stage)))?;
                let path = if path.is_dir() { path.join(TRIPLETS_FILE) } else { path };
                let triplets = read_triplets(&path)?;
                check_triplets(&triplets, dataset.len(), &path)?;
                train_align(
                    &AlignData::Triplets {
                        images: &dataset.images,
                        triplets: &triplets,
                    },
                    &reference,
                    &cfg.train,
                    Some(&held),
                )?
            } else {
                let pairs = PairedDataset::load(&data)?;
                train_align(&AlignData::Pairs(&pairs), &reference, &cfg.train, Some(&held))?
            };
            save_outcome(&out, &outcome)
        }
        Command::Sample { ckpt, prompts, .. } => {
            let model = ModelSource::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let prompts = match prompts {
                Some(p) => read_prompts(&p)?,
                None => HeldOutSet::build(&cfg, cfg.eval.prompts, cfg.eval.seed)?.prompts(cfg.eval.prompts),
            };
            let images = tpo_core::evaluator::ImageSource::images(&model, &prompts, &cfg.sampler)?;
            write_images(&out.join(tpo_core::scenegen::IMAGES_FILE), &[&images])?;
            let records = prompts
                .iter()
                .enumerate()
                .map(|(i, p)| MetaRecord::new(i, p.spec_of()?))
                .collect::<Result<Vec<_>>>()?;
            write_meta(&out.join(tpo_core::scenegen::META_FILE), &records)
        }
        Command::EvalAlign { ckpt, .. } => {
            let model = ModelSource::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let prompts = HeldOutSet::build(&cfg, cfg.eval.prompts, cfg.eval.seed)?.prompts(cfg.eval.prompts);
            let report = EvalReport::single(&eval_alignment(&model, &prompts, &cfg.sampler)?);
            write_text(&out.join("alignment.json"), &report.to_json()?)?;
            write_text(&out.join("alignment.csv"), &report.to_csv()?)
        }
        Command::EvalWinrate { a, b, .. } => {
            let a = ModelSource::from_checkpoint(&Checkpoint::load(&a)?)?;
            let b = ModelSource::from_checkpoint(&Checkpoint::load(&b)?)?;
            let prompts = HeldOutSet::build(&cfg, cfg.eval.prompts, cfg.eval.seed)?.prompts(cfg.eval.prompts);
            let report = tpo_core::evaluator::win_rate(&a, &b, &prompts, &cfg.sampler)?;
            write_text(&out.join("winrate.json"), &report.to_json()?)?;
            write_text(&out.join("winrate.csv"), &report.to_csv()?)
        }
        Command::EvalIps { ckpt, .. } => {
            let model = ModelSource::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let set = HeldOutSet::build(&cfg, cfg.eval.triplets, cfg.eval.seed)?;
            let items = set.ips_items(cfg.eval.triplets);
            let report = ips_report(
                &model.denoiser,
                &model.schedule,
                &items,
                &cfg.eval.ips,
                model.identity.clone(),
            )?;
            write_text(&out.join("ips.json"), &report.to_json()?)?;
            write_text(&out.join("ips.csv"), &report.to_csv()?)
        }
        Command::Report { ckpts, baseline, .. } => report(&cfg, &out, &ckpts, baseline.as_deref()),
    }
}

fn check_triplets(triplets: &[PreferenceTriplet], n: usize, path: &Path) -> Result<()> {
    if let Some(t) = triplets.iter().find(|t| t.image_index >= n) {
        return Err(Error::data(
            path,
            format!("triplet references image {} but the dataset holds {n}", t.image_index),
        ));
    }
    Ok(())
}

fn read_prompts(path: &Path) -> Result<Vec<Caption>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let c: Caption = serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
            c.spec_of()
                .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
            Ok(c)
        })
        .collect()
}

/// Held-out scenes with one mismatched caption each.
struct HeldOutSet {
    dataset: Dataset,
    triplets: Vec<PreferenceTriplet>,
}

impl HeldOutSet {
    fn build(cfg: &RunConfig, n: usize, seed: u64) -> Result<Self> {
        let dataset = Dataset::generate(n.max(1), seed)?;
        let mut plan = cfg.edit.clone();
        plan.seed = seed;
        plan.negatives_per_image = 1;
        let triplets = build_text_pref_dataset(&dataset.records, &plan)?;
        Ok(Self { dataset, triplets })
    }

    fn prompts(&self, n: usize) -> Vec<Caption> {
        self.triplets.iter().take(n).map(|t| t.c_w).collect()
    }

    fn ips_items(&self, n: usize) -> Vec<IpsItem<'_>> {
        self.triplets
            .iter()
            .take(n)
            .map(|t| IpsItem {
                x0: self.dataset.images[t.image_index].data(),
                c_w: t.c_w,
                c_l: t.c_l,
            })
            .collect()
    }

    fn held_out(&self, cfg: &RunConfig, n: usize) -> HeldOut<'_> {
        HeldOut {
            prompts: self.prompts(n),
            sampler: cfg.sampler.clone(),
            ips: Some(IpsProbe {
                items: self.ips_items(n),
                t_frac: cfg.eval.ips.t_frac,
                n_noise: cfg.eval.ips.n_noise,
                seed: cfg.eval.ips.seed,
            }),
        }
    }
}

fn save_outcome(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    outcome.last.save(&out.join(LAST_CKPT))?;
    outcome.best.save(&out.join(BEST_CKPT))?;
    for s in &outcome.snapshots {
        s.save(&out.join(format!("step_{:06}.ckpt", s.header.step)))?;
    }
    write_run_log(&out.join(RUN_LOG_FILE), &outcome.log)
}

fn parse_labelled(spec: &str) -> Result<(String, PathBuf)> {
    let (label, path) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--ckpt expects label=path, got {spec:?}")))?;
    if label.is_empty() {
        return Err(Error::Config(format!("--ckpt {spec:?} has an empty label")));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

fn report(cfg: &RunConfig, out: &Path, ckpts: &[String], baseline: Option<&str>) -> Result<()> {
    let labelled = ckpts.iter().map(|s| parse_labelled(s)).collect::<Result<Vec<_>>>()?;
    let mut models = Vec::with_capacity(labelled.len());
    for (label, path) in &labelled {
        models.push((label.clone(), ModelSource::from_checkpoint(&Checkpoint::load(path)?)?));
    }
    let base_label = baseline.unwrap_or(&labelled[0].0);
    let base = models
        .iter()
        .position(|(l, _)| l == base_label)
        .ok_or_else(|| Error::Config(format!("--baseline {base_label:?} is not one of the --ckpt labels")))?;

    let prompt_set = HeldOutSet::build(cfg, cfg.eval.prompts, cfg.eval.seed)?;
    let prompts = prompt_set.prompts(cfg.eval.prompts);
    let ips_set = HeldOutSet::build(cfg, cfg.eval.triplets, cfg.eval.seed)?;
    let items = ips_set.ips_items(cfg.eval.triplets);

    let evals = models
        .iter()
        .map(|(_, m)| eval_alignment(m, &prompts, &cfg.sampler))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(models.len());
    let mut ips_means = Vec::with_capacity(models.len());
    for (i, (label, m)) in models.iter().enumerate() {
        let ips = ips_report(&m.denoiser, &m.schedule, &items, &cfg.eval.ips, m.identity.clone())?;
        ips_means.push(ips.mean);
        let win = if i == base {
            None
        } else {
            EvalReport::compare(&evals[i], &evals[base])?.win_rate()
        };
        rows.push(SummaryRow {
            method: label.clone(),
            align_mean: Some(evals[i].mean),
            win_rate: win,
            ips_mean: Some(ips.mean),
        });
    }
    write_text(&out.join("summary.md"), &summary_markdown(&rows, base_label))?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Config(e.to_string()))? + "\n";
    write_text(&out.join("summary.json"), &json)?;
    if models.len() >= tpo_core::evaluator::MIN_CORRELATION_CHECKPOINTS {
        let points = rows
            .iter()
            .zip(&ips_means)
            .map(|(r, &ips_mean)| CorrelationPoint {
                label: r.method.clone(),
                ips_mean,
                align_mean: r.align_mean.unwrap_or_default(),
            })
            .collect();
        let corr = CorrelationReport::from_points(points)?;
        write_text(&out.join("correlation.json"), &corr.to_json()?)?;
        write_text(&out.join("correlation.csv"), &corr.to_csv()?)?;
    }
    Ok(())
}
