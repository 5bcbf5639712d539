use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schedule::{make_schedule, DiffusionSchedule};
use crate::autodiff::{BoundParams, Element, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::{Condition, IMAGE_LEN, NULL_TOKEN, VOCAB_SIZE};

pub const EMBED_PARAM: &str = "embed";

/// What the last dense layer outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    /// The noise estimate directly.
    Eps,
    /// A clean-image estimate `x0_hat`, mapped to
    /// `eps_hat = c_t (x_t - alpha_t x0_hat) / sigma_t` with the shrinkage
    /// `c_t = sigma_t^2 / (sigma_t^2 + k^2 alpha_t^2)` for the floor `k`.
    X0,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub parametrization: Parametrization,
    /// Shrinkage floor `k` of the clean-image parametrization.
    pub x0_floor: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            time_dim: 32,
            cond_dim: 32,
            vocab_size: VOCAB_SIZE,
            input_dim: IMAGE_LEN,
            parametrization: Parametrization::X0,
            x0_floor: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model.time_dim must be even and positive, got {}",
                self.time_dim
            )));
        }
        if self.cond_dim == 0 {
            return Err(Error::Config("model.cond_dim must be positive".into()));
        }
        if self.vocab_size <= NULL_TOKEN {
            return Err(Error::Config(format!(
                "model.vocab_size must exceed the null token id {NULL_TOKEN}, got {}",
                self.vocab_size
            )));
        }
        if !(self.x0_floor > 0.0) || !self.x0_floor.is_finite() {
            return Err(Error::Config(format!(
                "model.x0_floor must be positive, got {}",
                self.x0_floor
            )));
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim + self.time_dim + self.cond_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.input_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    /// Parameter names with their shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(EMBED_PARAM.to_string(), vec![self.vocab_size, self.cond_dim])];
        for (i, (fi, fo)) in self.layer_dims().into_iter().enumerate() {
            out.push((format!("l{i}.b"), vec![fo]));
            out.push((format!("l{i}.w"), vec![fi, fo]));
        }
        out
    }
}

/// Sinusoidal embedding of position `1000 * t / T`; sines then cosines.
pub fn time_embedding(t: usize, t_max: usize, dim: usize) -> Vec<f64> {
    let pos = 1000.0 * t as f64 / t_max as f64;
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    freqs
        .iter()
        .map(|f| (pos * f).sin())
        .chain(freqs.iter().map(|f| (pos * f).cos()))
        .collect()
}

/// Random initialization. The first layer's input blocks (pixels, time,
/// caption) are each scaled to contribute equal pre-activation variance.
pub fn init_params(cfg: &DenoiserConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut r = rng::from_seed(seed);
    let mut normal = |n: usize, std: f64| -> Vec<f32> {
        let d = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| d.sample(&mut r) as f32).collect()
    };
    store.insert(
        EMBED_PARAM,
        Tensor::new(
            vec![cfg.vocab_size, cfg.cond_dim],
            normal(cfg.vocab_size * cfg.cond_dim, 1.0),
        )?,
    )?;
    for (i, (fi, fo)) in cfg.layer_dims().into_iter().enumerate() {
        let w = if i == 0 {
            let mut w = Vec::with_capacity(fi * fo);
            for (rows, n_blocks) in [(cfg.input_dim, 3.0), (cfg.time_dim, 3.0), (cfg.cond_dim, 3.0)] {
                w.extend(normal(rows * fo, (1.0 / (rows as f64 * n_blocks)).sqrt()));
            }
            w
        } else {
            normal(fi * fo, (1.0 / fi as f64).sqrt())
        };
        store.insert(format!("l{i}.w"), Tensor::new(vec![fi, fo], w)?)?;
        store.insert(format!("l{i}.b"), Tensor::zeros(vec![fo]))?;
    }
    Ok(store)
}

/// Noise-prediction network evaluated on a tape.
pub trait EpsModel<'t, E: Element> {
    /// `x_t: [b, input_dim]`, one timestep and condition per row.
    fn predict(&self, x_t: Var<'t, E>, t: &[usize], conds: &[Condition]) -> Result<Var<'t, E>>;
}

/// Dense denoiser bound to a tape.
pub struct BoundDenoiser<'a, 't, E: Element> {
    cfg: &'a DenoiserConfig,
    schedule: DiffusionSchedule,
    tape: &'t Tape<E>,
    params: BoundParams<'t, E>,
}

impl<'a, 't, E: Element> BoundDenoiser<'a, 't, E> {
    pub fn new(
        cfg: &'a DenoiserConfig,
        t_max: usize,
        store: &ParameterStore<E>,
        tape: &'t Tape<E>,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            cfg,
            schedule: make_schedule(t_max)?,
            tape,
            params: store.bind(tape, trainable)?,
        })
    }

    /// Wrap parameters already bound to `tape`.
    pub fn from_bound(
        cfg: &'a DenoiserConfig,
        t_max: usize,
        params: BoundParams<'t, E>,
        tape: &'t Tape<E>,
    ) -> Result<Self> {
        Ok(Self {
            cfg,
            schedule: make_schedule(t_max)?,
            tape,
            params,
        })
    }

    pub fn params(&self) -> &BoundParams<'t, E> {
        &self.params
    }
}

impl<'t, E: Element> EpsModel<'t, E> for BoundDenoiser<'_, 't, E> {
    fn predict(&self, x_t: Var<'t, E>, t: &[usize], conds: &[Condition]) -> Result<Var<'t, E>> {
        let shape = x_t.shape();
        let b = t.len();
        if shape != [b, self.cfg.input_dim] || conds.len() != b {
            return Err(Error::InvalidArgument(format!(
                "denoiser input {shape:?} with {} timesteps and {} conditions, expected [{b}, {}]",
                t.len(),
                conds.len(),
                self.cfg.input_dim
            )));
        }
        let mut temb = Vec::with_capacity(b * self.cfg.time_dim);
        for &ti in t {
            let t_max = self.schedule.t_max();
            if ti == 0 || ti > t_max {
                return Err(Error::InvalidArgument(format!("timestep {ti} outside 1..={t_max}")));
            }
            temb.extend(
                time_embedding(ti, t_max, self.cfg.time_dim)
                    .into_iter()
                    .map(E::from_f64_lossy),
            );
        }
        let temb = self.tape.constant(Tensor::new(vec![b, self.cfg.time_dim], temb)?)?;
        let ids: Vec<Vec<usize>> = conds.iter().map(Condition::token_ids).collect();
        if let Some(bad) = ids.iter().flatten().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let cemb = self.tape.embed_mean(self.params.get(EMBED_PARAM)?, &ids)?;
        let mut h = self.tape.concat_cols(&[x_t, temb, cemb])?;
        let n_layers = self.cfg.hidden.len() + 1;
        for i in 0..n_layers {
            h = h.linear(
                self.params.get(&format!("l{i}.w"))?,
                self.params.get(&format!("l{i}.b"))?,
            )?;
            if i + 1 < n_layers {
                h = h.silu()?;
            }
        }
        match self.cfg.parametrization {
            Parametrization::Eps => Ok(h),
            Parametrization::X0 => {
                let d = self.cfg.input_dim;
                let mut inv_sigma = Vec::with_capacity(b * d);
                let mut gain = Vec::with_capacity(b * d);
                for &ti in t {
                    let (a, s) = (self.schedule.alpha(ti), self.schedule.sigma(ti));
                    let k = self.cfg.x0_floor;
                    let c_over_s = s / (s * s + k * k * a * a);
                    inv_sigma.extend(std::iter::repeat_n(E::from_f64_lossy(c_over_s), d));
                    gain.extend(std::iter::repeat_n(E::from_f64_lossy(-a * c_over_s), d));
                }
                let skip = x_t.mul_const(Tensor::new(vec![b, d], inv_sigma)?)?;
                Ok(h.mul_const(Tensor::new(vec![b, d], gain)?)?.add(skip)?)
            }
        }
    }
}

/// Owned denoiser: configuration, schedule length and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub t_max: usize,
    pub params: ParameterStore<f32>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, t_max: usize, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, t_max, params })
    }

    /// Every expected parameter present with its shape, all values finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::Numeric(format!(
                "denoiser has {} parameters, expected {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let p = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Numeric(format!("missing parameter {name:?}")))?;
            if p.shape() != shape.as_slice() {
                return Err(Error::Numeric(format!(
                    "parameter {name:?} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("parameter {name:?} has non-finite values")));
            }
        }
        Ok(())
    }

    /// Predicted noise for a row-major batch `x [b * input_dim]`.
    pub fn predict_eps(&self, x: &[f32], t: &[usize], conds: &[Condition]) -> Result<Vec<f32>> {
        let tape = Tape::new();
        let model = BoundDenoiser::new(&self.config, self.t_max, &self.params, &tape, false)?;
        let x = tape.constant(Tensor::new(vec![t.len(), self.config.input_dim], x.to_vec())?)?;
        let out = model.predict(x, t, conds)?;
        let data = out.value().data().to_vec();
        Ok(data)
    }
}
