use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter plus the number of updates taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl OptimState {
    /// Zero moments shaped like `params`.
    pub fn zeros_like(params: &ParameterStore<f32>) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = params
            .iter()
            .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Decoupled weight decay followed by the bias-corrected adaptive update.
/// Arithmetic is `f64`; parameters and moments are stored as `f32`.
pub fn adamw_step(
    params: &mut ParameterStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimState,
    hp: &AdamWParams,
    strict: bool,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for parameter {name:?}")))?;
        if g.shape() != p.shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient for {name:?} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if strict && !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name:?}")));
        }
        let n = p.numel();
        if state.m.get(name).map(Vec::len) != Some(n) || state.v.get(name).map(Vec::len) != Some(n) {
            return Err(Error::InvalidArgument(format!(
                "optimizer moments for {name:?} do not match the parameter"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked");
        let v = state.v.get_mut(name).expect("checked");
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi as f64;
            let m_new = hp.beta1 * *mi as f64 + (1.0 - hp.beta1) * gi;
            let v_new = hp.beta2 * *vi as f64 + (1.0 - hp.beta2) * gi * gi;
            let update = hp.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + hp.eps);
            *pi = (*pi as f64 * decay - update) as f32;
            *mi = m_new as f32;
            *vi = v_new as f32;
        }
    }
    if strict && !params.is_finite() {
        return Err(Error::Numeric(
            "parameters became non-finite after the optimizer step".into(),
        ));
    }
    Ok(())
}
