use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of diffusion steps.
pub const DEFAULT_T: usize = 1000;

/// Offset of the cosine curve near `t = 0`.
const COSINE_S: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Variance-preserving discrete schedule: `x_t = alpha_t x_0 + sigma_t eps`
/// for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    t_max: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

fn cosine_alpha_bar(s: f64, t_max: usize) -> f64 {
    let f = |u: f64| {
        ((u + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    f(s / t_max as f64) / f(0.0)
}

/// Cosine `alpha_bar` with per-step betas clipped at 0.999.
pub fn make_schedule(t_max: usize) -> Result<DiffusionSchedule> {
    if t_max < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {t_max}")));
    }
    let mut alpha_bar = 1.0f64;
    let mut alpha = Vec::with_capacity(t_max);
    let mut sigma = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let beta = (1.0 - cosine_alpha_bar(t as f64, t_max) / cosine_alpha_bar(t as f64 - 1.0, t_max)).min(MAX_BETA);
        alpha_bar *= 1.0 - beta;
        alpha.push(alpha_bar.sqrt());
        sigma.push((1.0 - alpha_bar).sqrt());
    }
    Ok(DiffusionSchedule { t_max, alpha, sigma })
}

impl DiffusionSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// `alpha_t^2`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1] * self.alpha[t - 1]
        }
    }

    /// `alpha_t x0 + sigma_t eps`, elementwise.
    pub fn forward_diffuse(&self, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check(t)?;
        if x0.len() != eps.len() {
            return Err(Error::InvalidArgument(format!(
                "forward_diffuse: x0 has {} values, eps has {}",
                x0.len(),
                eps.len()
            )));
        }
        let (a, s) = (self.alpha(t) as f32, self.sigma(t) as f32);
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// `round(frac * T)` clamped into `1..=T`.
    pub fn timestep_at(&self, frac: f64) -> usize {
        ((frac * self.t_max as f64).round() as usize).clamp(1, self.t_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_preserving_and_monotone() {
        let s = make_schedule(DEFAULT_T).unwrap();
        for t in 1..=s.t_max() {
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-6);
            if t > 1 {
                assert!(s.alpha(t) < s.alpha(t - 1));
                assert!(s.sigma(t) > s.sigma(t - 1));
            }
        }
        assert!(s.alpha(1) >= 0.999);
        assert!(s.alpha(s.t_max()) < 0.05);
    }

    #[test]
    fn rejects_short_schedule() {
        assert!(make_schedule(1).is_err());
        assert!(make_schedule(2).is_ok());
    }

    #[test]
    fn forward_diffuse_edge_cases() {
        let s = make_schedule(DEFAULT_T).unwrap();
        let x0 = [0.5f32, -0.25, 1.0];
        let eps = [1.0f32, 2.0, -1.0];
        let t = 300;
        let zero = s.forward_diffuse(&x0, t, &[0.0; 3]).unwrap();
        for (z, x) in zero.iter().zip(&x0) {
            assert_eq!(*z, s.alpha(t) as f32 * x);
        }
        let pure = s.forward_diffuse(&[0.0; 3], t, &eps).unwrap();
        for (p, e) in pure.iter().zip(&eps) {
            assert_eq!(*p, s.sigma(t) as f32 * e);
        }
        let near = s.forward_diffuse(&x0, 1, &eps).unwrap();
        assert!(near.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 0.05));
        assert!(s.forward_diffuse(&x0, 0, &eps).is_err());
        assert!(s.forward_diffuse(&x0, 1001, &eps).is_err());
    }

    #[test]
    fn midpoint_timestep() {
        let s = make_schedule(DEFAULT_T).unwrap();
        assert_eq!(s.timestep_at(0.5), 500);
        assert_eq!(s.timestep_at(0.0), 1);
    }
}
