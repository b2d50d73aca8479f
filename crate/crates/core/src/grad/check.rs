//! Central-difference gradient checking.
//!
//! The loss closure evaluates the model at a given flat parameter vector and
//! returns both the loss and the analytic gradient (obtained via
//! [`Graph::backward`](crate::grad::Graph::backward)). The checker perturbs
//! one parameter at a time and compares `(f(p+h) - f(p-h)) / 2h` against the
//! analytic entry.

use crate::{Error, Result};

/// Smallest and largest accepted perturbation step.
pub const STEP_RANGE: (f64, f64) = (1e-7, 1e-3);

/// Check every parameter. Returns the maximum relative error
/// `|fd - analytic| / max(|fd|, |analytic|, 1e-8)` over all entries
/// (0.0 for an empty parameter vector).
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_sampled(loss_fn, params, step, &all)
}

/// Check only the parameters listed in `indices`. Large models are too
/// expensive to sweep exhaustively (two loss evaluations per parameter), so
/// callers pass a deterministic sample.
pub fn finite_diff_check_sampled<F>(
    mut loss_fn: F,
    params: &[f64],
    step: f64,
    indices: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step >= STEP_RANGE.0 && step <= STEP_RANGE.1) {
        return Err(Error::InvalidHyperParam(format!(
            "finite-difference step must lie in [{}, {}], got {step}",
            STEP_RANGE.0, STEP_RANGE.1
        )));
    }
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "finite_diff_check base evaluation".into(),
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check",
            detail: format!(
                "analytic gradient has {} entries for {} parameters",
                analytic.len(),
                params.len()
            ),
        });
    }

    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    for &j in indices {
        if j >= params.len() {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_check",
                detail: format!("index {j} out of range for {} parameters", params.len()),
            });
        }
        work[j] = params[j] + step;
        let (plus, _) = loss_fn(&work)?;
        work[j] = params[j] - step;
        let (minus, _) = loss_fn(&work)?;
        work[j] = params[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("finite_diff_check perturbation of parameter {j}"),
            });
        }
        let fd = (plus - minus) / (2.0 * step);
        let a = analytic[j];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
