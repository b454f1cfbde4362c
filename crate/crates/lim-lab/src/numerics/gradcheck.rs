//! Finite-difference gradient verification. Always runs in f64; callers are
//! expected to rebuild their model in f64 precision for checking.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Worst observed deviation between analytic and central-difference
/// gradients, with the location that produced it.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_entry: usize,
}

/// Compare analytic gradients against central differences of `loss`.
///
/// `loss` must be a pure function of the parameter list. Each entry is
/// perturbed by plus and minus `h`; the relative error is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check(
    mut loss: impl FnMut(&[Matrix<f64>]) -> Result<f64>,
    params: &[Matrix<f64>],
    analytic: &[Matrix<f64>],
    h: f64,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "grad_check: {} parameter tensors but {} gradient tensors",
            params.len(),
            analytic.len()
        )));
    }
    if h <= 0.0 {
        return Err(Error::Config(format!("grad_check: step must be positive, got {h}")));
    }
    let mut work: Vec<Matrix<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: 0, worst_entry: 0 };
    for p in 0..params.len() {
        if params[p].shape() != analytic[p].shape() {
            return Err(Error::Shape(format!(
                "grad_check: parameter {p} is {}x{} but gradient is {}x{}",
                params[p].rows(),
                params[p].cols(),
                analytic[p].rows(),
                analytic[p].cols()
            )));
        }
        for i in 0..params[p].data().len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = loss(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = loss(&work)?;
            work[p].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: loss non-finite at parameter {p}, entry {i}"
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let an = analytic[p].data()[i];
            let rel = (an - numeric).abs() / 1.0f64.max(an.abs()).max(numeric.abs());
            if rel > report.max_rel_err {
                report = GradCheckReport { max_rel_err: rel, worst_param: p, worst_entry: i };
            }
        }
    }
    Ok(report)
}
