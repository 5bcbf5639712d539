use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::{Caption, Condition, Image, IMAGE_LEN};

/// Prompts evaluated together in one denoiser call.
const SAMPLE_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    /// Posterior-variance ancestral sampling.
    Ancestral,
    /// DDIM with noise share `eta`.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::Deterministic,
            steps: 50,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.steps == 0 || self.steps > t_max {
            return Err(Error::Config(format!(
                "sampler.steps must be in 1..={t_max}, got {}",
                self.steps
            )));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!(
                "sampler.guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "sampler.eta must be in [0, 1], got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// `steps` timesteps evenly spaced over `1..=T`, in decreasing order.
pub fn step_schedule(t_max: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![t_max];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (1.0 + i as f64 * (t_max - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// `(1 - g) * eps_null + g * eps_cond`, which equals `eps_cond` at `g = 1`
/// and `eps_null` at `g = 0` exactly.
pub fn guided_eps(eps_null: &[f32], eps_cond: &[f32], g: f32) -> Vec<f32> {
    eps_null
        .iter()
        .zip(eps_cond)
        .map(|(n, c)| (1.0 - g) * n + g * c)
        .collect()
}

/// Mean and noise scale of one reverse update from `t` to `t_prev`
/// (`t_prev = 0` is the final step).
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseStep {
    pub mean: Vec<f32>,
    pub std: f64,
}

/// The prediction `x0_hat` is clipped to `[-1, 1]` and the noise estimate is
/// recomputed from it before either update rule is applied.
pub fn reverse_step(
    schedule: &DiffusionSchedule,
    method: SamplerMethod,
    eta: f64,
    x_t: &[f32],
    eps: &[f32],
    t: usize,
    t_prev: usize,
) -> ReverseStep {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0: Vec<f64> = x_t
        .iter()
        .zip(eps)
        .map(|(&x, &e)| ((x as f64 - s * e as f64) / a).clamp(-1.0, 1.0))
        .collect();
    let eps_hat: Vec<f64> = x_t.iter().zip(&x0).map(|(&x, x0)| (x as f64 - a * x0) / s).collect();
    if t_prev == 0 {
        return ReverseStep {
            mean: x0.iter().map(|v| *v as f32).collect(),
            std: 0.0,
        };
    }
    let post_var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
    match method {
        SamplerMethod::Ancestral => {
            let c0 = ab_prev.sqrt() * (1.0 - ab / ab_prev) / (1.0 - ab);
            let ct = (ab / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            ReverseStep {
                mean: x0
                    .iter()
                    .zip(x_t)
                    .map(|(x0, &x)| (c0 * x0 + ct * x as f64) as f32)
                    .collect(),
                std: post_var.sqrt(),
            }
        }
        SamplerMethod::Deterministic => {
            let var = eta * eta * post_var;
            let dir = (1.0 - ab_prev - var).max(0.0).sqrt();
            ReverseStep {
                mean: x0
                    .iter()
                    .zip(&eps_hat)
                    .map(|(x0, e)| (ab_prev.sqrt() * x0 + dir * e) as f32)
                    .collect(),
                std: var.sqrt(),
            }
        }
    }
}

/// Source of guided noise predictions for a batch of rows at one timestep.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &[f32], t: usize, conds: &[Condition]) -> Result<Vec<f32>>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x: &[f32], t: usize, conds: &[Condition]) -> Result<Vec<f32>> {
        self.predict_eps(x, &vec![t; conds.len()], conds)
    }
}

/// Sample one image per prompt. Prompt `i` draws all its noise from
/// `stream(seed, i)`, so output does not depend on batching or threads.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    prompts: &[Caption],
    cfg: &SamplerConfig,
) -> Result<Vec<Image>> {
    cfg.validate(schedule.t_max())?;
    let indexed: Vec<(usize, Caption)> = prompts.iter().copied().enumerate().collect();
    let chunks: Vec<Vec<Image>> = indexed
        .par_chunks(SAMPLE_CHUNK)
        .map(|chunk| sample_chunk(model, schedule, chunk, cfg))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn sample_chunk<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    chunk: &[(usize, Caption)],
    cfg: &SamplerConfig,
) -> Result<Vec<Image>> {
    let b = chunk.len();
    let mut rngs: Vec<rng::Rng> = chunk.iter().map(|(i, _)| rng::stream(cfg.seed, *i as u64)).collect();
    let mut x: Vec<f32> = rngs.iter_mut().flat_map(|r| rng::normal_vec(r, IMAGE_LEN)).collect();
    let conds: Vec<Condition> = chunk
        .iter()
        .map(|(_, c)| Condition::Caption(*c))
        .chain(std::iter::repeat_n(Condition::Null, b))
        .collect();
    let ts = step_schedule(schedule.t_max(), cfg.steps);
    let g = cfg.guidance_scale as f32;
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let mut input = x.clone();
        input.extend_from_slice(&x);
        let out = model.predict(&input, t, &conds)?;
        if out.len() != 2 * b * IMAGE_LEN {
            return Err(Error::Numeric(format!(
                "noise prediction has {} values, expected {}",
                out.len(),
                2 * b * IMAGE_LEN
            )));
        }
        let (cond, null) = out.split_at(b * IMAGE_LEN);
        let eps = guided_eps(null, cond, g);
        let mut next = Vec::with_capacity(x.len());
        for (row, r) in rngs.iter_mut().enumerate() {
            let span = row * IMAGE_LEN..(row + 1) * IMAGE_LEN;
            let step = reverse_step(schedule, cfg.method, cfg.eta, &x[span.clone()], &eps[span], t, t_prev);
            if step.std > 0.0 {
                let z = rng::normal_vec(r, IMAGE_LEN);
                next.extend(step.mean.iter().zip(&z).map(|(m, z)| m + (step.std as f32) * z));
            } else {
                next.extend(step.mean);
            }
        }
        x = next;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite pixels".into()));
    }
    x.chunks(IMAGE_LEN)
        .map(|c| Image::from_data(c.to_vec()).map(Image::clamped))
        .collect()
}
