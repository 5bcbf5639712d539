//! Central finite-difference checks of tape gradients.
//!
//! Both the analytic and the numeric side run in `f64`.

use super::params::{BoundParams, ParameterStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradError>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compare analytic gradients of `f` against central differences with the
/// given `step`, element by element, for every parameter in `params`.
///
/// `f` must build a scalar on the tape from the bound parameters. It is
/// evaluated twice at the unperturbed point; disagreement is reported as
/// [`AutodiffError::Nondeterministic`].
pub fn grad_check<F, Err>(params: &ParameterStore<f64>, f: F, step: f64, tol: f64) -> Result<GradCheckReport, Err>
where
    F: for<'t> Fn(&'t Tape<f64>, &BoundParams<'t, f64>) -> Result<Var<'t, f64>, Err>,
    Err: From<AutodiffError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(AutodiffError::InvalidArgument {
            what: format!("grad_check step must be positive, got {step}"),
        }
        .into());
    }
    let eval = |store: &ParameterStore<f64>| -> Result<f64, Err> {
        let tape = Tape::<f64>::new();
        let bound = store.bind(&tape, false)?;
        Ok(f(&tape, &bound)?.item())
    };

    let base_a = eval(params)?;
    let base_b = eval(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(AutodiffError::Nondeterministic {
            first: base_a,
            second: base_b,
        }
        .into());
    }

    let tape = Tape::<f64>::new();
    let bound = params.bind(&tape, true)?;
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(loss)?;

    let mut per_param = Vec::new();
    let mut overall = 0.0f64;
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let var = bound.get(name)?;
        let analytic = grads
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let mut worst = ParamGradError {
            name: name.to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..value.numel() {
            let orig = value.data()[i];
            probe.get_mut(name).expect("probe mirrors params").data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("probe mirrors params").data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("probe mirrors params").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_err || i == 0 {
                worst.max_rel_err = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        overall = overall.max(worst.max_rel_err);
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
        tol,
    })
}
