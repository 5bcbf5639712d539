//! Training objectives and the implicit preference score.
//!
//! Every loss is built on a tape from two [`EpsModel`]s: the trainable
//! model and a frozen reference bound without gradients. The diffusion loss
//! sums squared errors over pixels; the preference objectives use the
//! reduction chosen in [`AlignHyper`]. The timestep weighting is constant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::diffusion::{DiffusionSchedule, EpsModel, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::{Caption, Condition, IMAGE_LEN};

/// How per-item squared errors are reduced over pixels inside the
/// preference objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorReduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignHyper {
    pub beta: f64,
    pub lambda_bound: f64,
    pub clip_enabled: bool,
    /// Items used for the KTO baseline estimate; `None` means the whole batch.
    pub kl_batch: Option<usize>,
    /// Diffuse the mismatched-caption branch with its own noise draw.
    pub independent_noise: bool,
    pub reduction: ErrorReduction,
}

impl Default for AlignHyper {
    fn default() -> Self {
        Self {
            beta: 5000.0,
            lambda_bound: 0.1,
            clip_enabled: true,
            kl_batch: None,
            independent_noise: false,
            reduction: ErrorReduction::Mean,
        }
    }
}

impl AlignHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "train.hyper.beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.lambda_bound >= 0.0) {
            return Err(Error::Config(format!(
                "train.hyper.lambda_bound must be >= 0, got {}",
                self.lambda_bound
            )));
        }
        if self.kl_batch == Some(0) {
            return Err(Error::Config("train.hyper.kl_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Images `x0` and noises `eps` are row-major `[b, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionBatch<E = f32> {
    pub x0: Tensor<E>,
    pub eps: Tensor<E>,
    pub t: Vec<usize>,
    pub conds: Vec<Condition>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch<E = f32> {
    pub x0: Tensor<E>,
    pub eps: Tensor<E>,
    /// Noise for the mismatched branch when noises are independent.
    pub eps_l: Option<Tensor<E>>,
    pub t: Vec<usize>,
    pub c_w: Vec<Caption>,
    pub c_l: Vec<Caption>,
}

/// Image-level labels: `omega[i] = +1` for a matched/preferred item, `-1`
/// otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct KtoBatch<E = f32> {
    pub x0: Tensor<E>,
    pub eps: Tensor<E>,
    pub t: Vec<usize>,
    pub conds: Vec<Caption>,
    pub omega: Vec<i8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePairBatch<E = f32> {
    pub x0_w: Tensor<E>,
    pub x0_l: Tensor<E>,
    pub eps_w: Tensor<E>,
    pub eps_l: Tensor<E>,
    pub t: Vec<usize>,
    pub conds: Vec<Caption>,
}

fn rows<E: Element>(x: &Tensor<E>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [b, d] if *b > 0 => Ok((*b, *d)),
        s => Err(Error::InvalidArgument(format!(
            "{what} must be a non-empty [b, d] tensor, got {s:?}"
        ))),
    }
}

fn check_batch<E: Element>(x0: &Tensor<E>, eps: &Tensor<E>, t: &[usize], n_conds: usize) -> Result<usize> {
    let (b, _) = rows(x0, "x0")?;
    if eps.shape() != x0.shape() {
        return Err(Error::InvalidArgument(format!(
            "noise shape {:?} differs from image shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    if t.len() != b || n_conds != b {
        return Err(Error::InvalidArgument(format!(
            "batch of {b} images has {} timesteps and {n_conds} conditions",
            t.len()
        )));
    }
    Ok(b)
}

/// `alpha_t x0 + sigma_t eps` row by row.
pub fn noisy_input<E: Element>(
    schedule: &DiffusionSchedule,
    x0: &Tensor<E>,
    eps: &Tensor<E>,
    t: &[usize],
) -> Result<Tensor<E>> {
    let (b, d) = rows(x0, "x0")?;
    let mut out = Vec::with_capacity(b * d);
    for (i, &ti) in t.iter().enumerate() {
        if ti == 0 || ti > schedule.t_max() {
            return Err(Error::InvalidArgument(format!(
                "timestep {ti} outside 1..={}",
                schedule.t_max()
            )));
        }
        let a = E::from_f64_lossy(schedule.alpha(ti));
        let s = E::from_f64_lossy(schedule.sigma(ti));
        let span = i * d..(i + 1) * d;
        out.extend(
            x0.data()[span.clone()]
                .iter()
                .zip(&eps.data()[span])
                .map(|(&x, &e)| a * x + s * e),
        );
    }
    Ok(Tensor::new(vec![b, d], out)?)
}

/// `||eps - model(x_t, c, t)||^2` per row.
fn sq_err<'t, E: Element>(
    model: &dyn EpsModel<'t, E>,
    x_t: Var<'t, E>,
    eps: Var<'t, E>,
    t: &[usize],
    conds: &[Condition],
) -> Result<Var<'t, E>> {
    Ok(model.predict(x_t, t, conds)?.sub(eps)?.sq_norm_rows()?)
}

/// [`sq_err`] reduced per `hyper.reduction`.
fn pref_err<'t, E: Element>(
    model: &dyn EpsModel<'t, E>,
    x_t: Var<'t, E>,
    eps: Var<'t, E>,
    t: &[usize],
    conds: &[Condition],
    hyper: &AlignHyper,
) -> Result<Var<'t, E>> {
    let d = x_t.shape()[1];
    let err = sq_err(model, x_t, eps, t, conds)?;
    match hyper.reduction {
        ErrorReduction::Sum => Ok(err),
        ErrorReduction::Mean => Ok(err.scale(1.0 / d as f64)?),
    }
}

fn caption_conds(c: &[Caption]) -> Vec<Condition> {
    c.iter().copied().map(Condition::Caption).collect()
}

/// Mean over the batch of the per-item squared noise error.
pub fn dm_loss<'t, E: Element>(
    tape: &'t Tape<E>,
    model: &dyn EpsModel<'t, E>,
    schedule: &DiffusionSchedule,
    batch: &DiffusionBatch<E>,
) -> Result<Var<'t, E>> {
    check_batch(&batch.x0, &batch.eps, &batch.t, batch.conds.len())?;
    let x_t = tape.constant(noisy_input(schedule, &batch.x0, &batch.eps, &batch.t)?)?;
    let eps = tape.constant(batch.eps.clone())?;
    Ok(sq_err(model, x_t, eps, &batch.t, &batch.conds)?.mean()?)
}

/// Per-item errors entering the pairwise objectives, each of shape `[b]`.
pub struct PairTerms<'t, E: Element> {
    pub err_w: Var<'t, E>,
    pub ref_w: Var<'t, E>,
    /// Trainable losing-branch error before clipping.
    pub err_l_raw: Var<'t, E>,
    /// Losing-branch error after the optional clamp at `ref_l + lambda_bound`.
    pub err_l: Var<'t, E>,
    pub ref_l: Var<'t, E>,
}

#[allow(clippy::too_many_arguments)]
fn pair_terms<'t, E: Element>(
    tape: &'t Tape<E>,
    theta: &dyn EpsModel<'t, E>,
    reference: &dyn EpsModel<'t, E>,
    (x_w, eps_w, c_w): (&Tensor<E>, &Tensor<E>, &[Condition]),
    (x_l, eps_l, c_l): (&Tensor<E>, &Tensor<E>, &[Condition]),
    t: &[usize],
    hyper: &AlignHyper,
) -> Result<PairTerms<'t, E>> {
    let xw = tape.constant(x_w.clone())?;
    let ew = tape.constant(eps_w.clone())?;
    let (xl, el) = if std::ptr::eq(x_w, x_l) && std::ptr::eq(eps_w, eps_l) {
        (xw, ew)
    } else {
        (tape.constant(x_l.clone())?, tape.constant(eps_l.clone())?)
    };
    let err_w = pref_err(theta, xw, ew, t, c_w, hyper)?;
    let ref_w = pref_err(reference, xw, ew, t, c_w, hyper)?;
    let err_l_raw = pref_err(theta, xl, el, t, c_l, hyper)?;
    let ref_l = pref_err(reference, xl, el, t, c_l, hyper)?;
    let err_l = if hyper.clip_enabled {
        let bound = ref_l.add_scalar(hyper.lambda_bound)?;
        err_l_raw.clamp_above(bound)?
    } else {
        err_l_raw
    };
    Ok(PairTerms {
        err_w,
        ref_w,
        err_l_raw,
        err_l,
        ref_l,
    })
}

/// `-mean log sigmoid(-beta * (delta_w - delta_l))`
fn pairwise_loss<'t, E: Element>(terms: &PairTerms<'t, E>, beta: f64) -> Result<Var<'t, E>> {
    let dw = terms.err_w.sub(terms.ref_w)?;
    let dl = terms.err_l.sub(terms.ref_l)?;
    Ok(dw.sub(dl)?.scale(-beta)?.log_sigmoid()?.mean()?.neg()?)
}

/// Error terms of the text-preference objective with the corruption
/// `(t, eps, x_t)` shared between the two caption branches unless
/// `hyper.independent_noise` is set.
pub fn tdpo_terms<'t, E: Element>(
    tape: &'t Tape<E>,
    theta: &dyn EpsModel<'t, E>,
    reference: &dyn EpsModel<'t, E>,
    schedule: &DiffusionSchedule,
    batch: &TripletBatch<E>,
    hyper: &AlignHyper,
) -> Result<PairTerms<'t, E>> {
    hyper.validate()?;
    let b = check_batch(&batch.x0, &batch.eps, &batch.t, batch.c_w.len())?;
    if batch.c_l.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} mismatched captions for {b} images",
            batch.c_l.len()
        )));
    }
    let x_t = noisy_input(schedule, &batch.x0, &batch.eps, &batch.t)?;
    let (c_w, c_l) = (caption_conds(&batch.c_w), caption_conds(&batch.c_l));
    match (&batch.eps_l, hyper.independent_noise) {
        (Some(eps_l), true) => {
            check_batch(&batch.x0, eps_l, &batch.t, b)?;
            let x_tl = noisy_input(schedule, &batch.x0, eps_l, &batch.t)?;
            pair_terms(
                tape,
                theta,
                reference,
                (&x_t, &batch.eps, &c_w),
                (&x_tl, eps_l, &c_l),
                &batch.t,
                hyper,
            )
        }
        (None, true) => Err(Error::InvalidArgument(
            "independent_noise requires a second noise draw".into(),
        )),
        _ => pair_terms(
            tape,
            theta,
            reference,
            (&x_t, &batch.eps, &c_w),
            (&x_t, &batch.eps, &c_l),
            &batch.t,
            hyper,
        ),
    }
}

pub fn tdpo_loss<'t, E: Element>(
    tape: &'t Tape<E>,
    theta: &dyn EpsModel<'t, E>,
    reference: &dyn EpsModel<'t, E>,
    schedule: &DiffusionSchedule,
    batch: &TripletBatch<E>,
    hyper: &AlignHyper,
) -> Result<Var<'t, E>> {
    pairwise_loss(&tdpo_terms(tape, theta, reference, schedule, batch, hyper)?, hyper.beta)
}

/// Preferred and rejected images diffused with their own noises at a shared
/// timestep under one caption; the clamp acts on the rejected image.
pub fn dpo_image_terms<'t, E: Element>(
    tape: &'t Tape<E>,
    theta: &dyn EpsModel<'t, E>,
    reference: &dyn EpsModel<'t, E>,
    schedule: &DiffusionSchedule,
    batch: &ImagePairBatch<E>,
    hyper: &AlignHyper,
) -> Result<PairTerms<'t, E>> {
    hyper.validate()?;
    let b = check_batch(&batch.x0_w, &batch.eps_w, &batch.t, batch.conds.len())?;
    check_batch(&batch.x0_l, &batch.eps_l, &batch.t, b)?;
    let xw = noisy_input(schedule, &batch.x0_w, &batch.eps_w, &batch.t)?;
    let xl = noisy_input(schedule, &batch.x0_l, &batch.eps_l, &batch.t)?;
    let c = caption_conds(&batch.conds);
    pair_terms(
        tape,
        theta,
        reference,
        (&xw, &batch.eps_w, &c),
        (&xl, &batch.eps_l, &c),
        &batch.t,
        hyper,
    )
}

pub fn dpo_image_loss<'t, E: Element>(
    tape: &'t Tape<E>,
    theta: &dyn EpsModel<'t, E>,
    reference: &dyn EpsModel<'t, E>,
    schedule: &DiffusionSchedule,
    batch: &ImagePairBatch<E>,
    hyper: &AlignHyper,
) -> Result<Var<'t, E>> {
    pairwise_loss(
        &dpo_image_terms(tape, theta, reference, schedule, batch, hyper)?,
        hyper.beta,
    )
}

/// Per-item `Delta = err_theta - err_ref` (after the clamp for `omega = -1`
/// items) and the baseline `z0 = max(0, mean_{i < m} beta * (-Delta_i))`.
pub struct KtoTerms<'t, E: Element> {
    pub delta: Var<'t, E>,
    pub z0: f64,
}

pub fn kto_terms<'t, E: Element>(
    tape: &'t Tape<E>,
    theta: &dyn EpsModel<'t, E>,
    reference: &dyn EpsModel<'t, E>,
    schedule: &DiffusionSchedule,
    batch: &KtoBatch<E>,
    hyper: &AlignHyper,
) -> Result<KtoTerms<'t, E>> {
    hyper.validate()?;
    let b = check_batch(&batch.x0, &batch.eps, &batch.t, batch.conds.len())?;
    if batch.omega.len() != b || batch.omega.iter().any(|w| *w != 1 && *w != -1) {
        return Err(Error::InvalidArgument(
            "omega must hold one +1/-1 label per item".into(),
        ));
    }
    let m = hyper.kl_batch.unwrap_or(b);
    if m > b {
        return Err(Error::InvalidArgument(format!("kl_batch {m} exceeds batch size {b}")));
    }
    let x_t = tape.constant(noisy_input(schedule, &batch.x0, &batch.eps, &batch.t)?)?;
    let eps = tape.constant(batch.eps.clone())?;
    let conds = caption_conds(&batch.conds);
    let err = pref_err(theta, x_t, eps, &batch.t, &conds, hyper)?;
    let ref_err = pref_err(reference, x_t, eps, &batch.t, &conds, hyper)?;
    let err = if hyper.clip_enabled {
        let bound: Vec<E> = ref_err
            .value()
            .data()
            .iter()
            .zip(&batch.omega)
            .map(|(&r, &w)| {
                if w < 0 {
                    r + E::from_f64_lossy(hyper.lambda_bound)
                } else {
                    E::max_value()
                }
            })
            .collect();
        err.clamp_above(tape.constant(Tensor::new(vec![b], bound)?)?)?
    } else {
        err
    };
    let delta = err.sub(ref_err)?;
    let mean_reward = delta.value().data()[..m]
        .iter()
        .map(|d| -hyper.beta * d.to_f64().unwrap_or(f64::NAN))
        .sum::<f64>()
        / m as f64;
    Ok(KtoTerms {
        delta,
        z0: mean_reward.max(0.0),
    })
}

/// `-mean sigmoid(omega * beta * (-Delta - z0))`
pub fn kto_objective<'t, E: Element>(terms: &KtoTerms<'t, E>, omega: &[i8], beta: f64) -> Result<Var<'t, E>> {
    let w: Vec<E> = omega.iter().map(|&o| E::from_f64_lossy(o as f64 * beta)).collect();
    let n = w.len();
    Ok(terms
        .delta
        .neg()?
        .add_scalar(-terms.z0)?
        .mul_const(Tensor::new(vec![n], w)?)?
        .sigmoid()?
        .mean()?
        .neg()?)
}

/// Text KTO: `omega` marks whether each caption matches its image.
pub fn tkto_loss<'t, E: Element>(
    tape: &'t Tape<E>,
    theta: &dyn EpsModel<'t, E>,
    reference: &dyn EpsModel<'t, E>,
    schedule: &DiffusionSchedule,
    batch: &KtoBatch<E>,
    hyper: &AlignHyper,
) -> Result<Var<'t, E>> {
    let terms = kto_terms(tape, theta, reference, schedule, batch, hyper)?;
    kto_objective(&terms, &batch.omega, hyper.beta)
}

/// Image KTO: `omega` marks preferred and rejected images under their caption.
pub fn kto_image_loss<'t, E: Element>(
    tape: &'t Tape<E>,
    theta: &dyn EpsModel<'t, E>,
    reference: &dyn EpsModel<'t, E>,
    schedule: &DiffusionSchedule,
    batch: &KtoBatch<E>,
    hyper: &AlignHyper,
) -> Result<Var<'t, E>> {
    tkto_loss(tape, theta, reference, schedule, batch, hyper)
}

/// One scored triplet: a clean image with its matched and mismatched caption.
#[derive(Clone, Copy, Debug)]
pub struct IpsItem<'a> {
    pub x0: &'a [f32],
    pub c_w: Caption,
    pub c_l: Caption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpsScores {
    pub t: usize,
    pub n_noise: usize,
    pub scores: Vec<f64>,
    pub mean: f64,
}

/// Triplets scored together in one prediction call.
const IPS_CHUNK: usize = 8;

/// Per triplet: mean over `n_noise` draws at `t = round(t_frac * T)` of
/// `||eps - eps(x_t, c_l)||^2 - ||eps - eps(x_t, c_w)||^2`. Triplet `i`
/// draws its noise from `stream(seed, i)`; both captions see the same `x_t`.
pub fn implicit_preference_score<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    items: &[IpsItem<'_>],
    t_frac: f64,
    n_noise: usize,
    seed: u64,
) -> Result<IpsScores> {
    if n_noise < 1 {
        return Err(Error::InvalidArgument("n_noise must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&t_frac) {
        return Err(Error::InvalidArgument(format!(
            "t_frac must be in [0, 1], got {t_frac}"
        )));
    }
    if let Some(i) = items.iter().position(|it| it.x0.len() != IMAGE_LEN) {
        return Err(Error::InvalidArgument(format!(
            "triplet {i} image has {} values",
            items[i].x0.len()
        )));
    }
    let t = schedule.timestep_at(t_frac);
    let (a, s) = (schedule.alpha(t) as f32, schedule.sigma(t) as f32);
    let indexed: Vec<(usize, &IpsItem<'_>)> = items.iter().enumerate().collect();
    let chunks: Vec<Vec<f64>> = indexed
        .par_chunks(IPS_CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut x = Vec::new();
            let mut eps_all = Vec::new();
            let mut conds = Vec::new();
            for (i, item) in chunk {
                let mut r = rng::stream(seed, *i as u64);
                for _ in 0..n_noise {
                    let eps = rng::normal_vec(&mut r, IMAGE_LEN);
                    let x_t: Vec<f32> = item.x0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
                    for c in [item.c_w, item.c_l] {
                        x.extend_from_slice(&x_t);
                        conds.push(Condition::Caption(c));
                    }
                    eps_all.push(eps);
                }
            }
            let pred = model.predict(&x, t, &conds)?;
            let err = |row: usize, eps: &[f32]| -> f64 {
                pred[row * IMAGE_LEN..(row + 1) * IMAGE_LEN]
                    .iter()
                    .zip(eps)
                    .map(|(p, e)| {
                        let d = (*e - *p) as f64;
                        d * d
                    })
                    .sum()
            };
            Ok((0..chunk.len())
                .map(|j| {
                    (0..n_noise)
                        .map(|k| {
                            let draw = j * n_noise + k;
                            let eps = &eps_all[draw];
                            err(2 * draw + 1, eps) - err(2 * draw, eps)
                        })
                        .sum::<f64>()
                        / n_noise as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = chunks.into_iter().flatten().collect();
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok(IpsScores {
        t,
        n_noise,
        scores,
        mean,
    })
}
