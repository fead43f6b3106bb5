use super::norm_inf;
use crate::error::{Error, Result};

/// `cbrt(ε) · (1 + ‖θ‖∞)`, the usual central-difference step.
pub fn default_fd_step(theta: &[f64]) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + norm_inf(theta))
}

/// Central-difference gradient of `f` at `theta`.
///
/// Test oracle only; production gradients are analytic.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let fp = f(&probe)?;
        probe[i] = theta[i] - h;
        let fm = f(&probe)?;
        probe[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation(format!(
                "probe along coordinate {i} returned {fp} / {fm}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}
