//! The run configuration file and its defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tpo_core::diffusion::{DenoiserConfig, SamplerConfig, DEFAULT_T};
use tpo_core::editor::EditPlan;
use tpo_core::evaluator::IpsProtocol;
use tpo_core::trainer::TrainConfig;
use tpo_core::{Error, Result};

/// JSON schema of [`RunConfig`], shipped with the binary.
pub const SCHEMA: &str = include_str!("../run_config.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 5000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_max: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: DEFAULT_T }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Prompts sampled at training evaluation points to pick the best checkpoint.
    pub select_prompts: usize,
    pub select_seed: u64,
    /// Held-out prompts for alignment and win-rate evaluation.
    pub prompts: usize,
    /// Held-out triplets for the implicit preference score.
    pub triplets: usize,
    /// Seed of the held-out scenes and their mismatched captions.
    pub seed: u64,
    pub ips: IpsProtocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            select_prompts: 64,
            select_seed: 12345,
            prompts: 200,
            triplets: 500,
            seed: 777,
            ips: IpsProtocol::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub edit: EditPlan,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults overlaid with the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n == 0 {
            return Err(Error::Config("data.n must be at least 1".into()));
        }
        self.edit.validate()?;
        self.model.validate()?;
        if self.schedule.t_max < 2 {
            return Err(Error::Config(format!(
                "schedule.t_max must be at least 2, got {}",
                self.schedule.t_max
            )));
        }
        self.train.validate()?;
        self.sampler.validate(self.schedule.t_max)?;
        let ips = &self.eval.ips;
        if ips.n_noise == 0 {
            return Err(Error::Config("eval.ips.n_noise must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&ips.t_frac) {
            return Err(Error::Config(format!(
                "eval.ips.t_frac must be in [0, 1], got {}",
                ips.t_frac
            )));
        }
        if self.eval.prompts == 0 || self.eval.triplets == 0 {
            return Err(Error::Config(
                "eval.prompts and eval.triplets must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Write the effective config into `dir` as `config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

pub const CONFIG_FILE: &str = "config.json";
