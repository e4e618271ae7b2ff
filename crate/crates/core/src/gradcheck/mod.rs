//! Central finite-difference checks of tape gradients.

mod suites;

use crate::tensor::{Result, Tape, Tensor, Var};

pub use suites::{
    corrupted_suite, run_suites, standard_suites, toy_batch, toy_params, GradSuite, SuiteOutcome, SuiteReport,
};

/// Step used by every check in this crate.
pub const FD_STEP: f64 = 1e-6;
/// Acceptance threshold on the relative error.
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences at `h = 1e-6`
/// carry roundoff near `1e-9` once logits are scaled by a temperature of 20,
/// so gradients smaller than this floor are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            checked: self.checked + other.checked,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives one trainable leaf per entry of `inputs`, in order.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    };
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut result = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            result.max_rel_err = result.max_rel_err.max(relative_error(a, numeric));
            result.max_abs_err = result.max_abs_err.max((a - numeric).abs());
            result.checked += 1;
        }
    }
    Ok(result)
}
