use serde::{Deserialize, Serialize};

use super::{axpy, dot, norm, sub};
use crate::error::{Error, Result};

/// Conjugate-gradient settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    /// Relative residual threshold `‖Ax − b‖ ≤ tol·‖b‖`.
    pub tol: f64,
    /// Iteration cap; `None` means `10 · dim`.
    pub max_iter: Option<usize>,
    /// Added to the operator diagonal.
    pub extra_damping: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
            extra_damping: 0.0,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("cg tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == Some(0) {
            return Err(Error::InvalidConfig("cg max_iter must be >= 1".into()));
        }
        if !(self.extra_damping >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "extra_damping must be >= 0, got {}",
                self.extra_damping
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// True relative residual `‖Ax − b‖ / ‖b‖` of the returned `x`.
    pub residual: f64,
}

/// Solves `A x = b` for a symmetric positive-definite operator.
///
/// The recursive residual drives the iteration; once it passes `tol` the true
/// residual is recomputed and, if an inexact operator (e.g. a differenced
/// Hessian-vector product) left it above `tol`, CG is restarted from the
/// current iterate.
pub fn cg_solve<F>(apply: F, b: &[f64], cfg: &CgConfig) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cg_solve_observed(apply, b, cfg, |_| {})
}

/// [`cg_solve`] with a callback receiving every iterate.
pub fn cg_solve_observed<F, O>(mut apply: F, b: &[f64], cfg: &CgConfig, mut observe: O) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    O: FnMut(&[f64]),
{
    cfg.validate()?;
    let n = b.len();
    let max_iter = cfg.max_iter.unwrap_or(10 * n.max(1));
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let damping = cfg.extra_damping;
    let mut op = |v: &[f64]| -> Result<Vec<f64>> {
        let mut out = apply(v)?;
        if out.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: v.len(),
                found: out.len(),
                line: None,
            });
        }
        if damping != 0.0 {
            axpy(damping, v, &mut out);
        }
        Ok(out)
    };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut iterations = 0;
    const MAX_RESTARTS: usize = 4;
    for restart in 0..=MAX_RESTARTS {
        let mut p = r.clone();
        let mut rs = dot(&r, &r);
        while iterations < max_iter && rs.sqrt() > cfg.tol * b_norm {
            let ap = op(&p)?;
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(Error::NegativeCurvature {
                    iteration: iterations,
                    curvature: pap,
                });
            }
            let alpha = rs / pap;
            axpy(alpha, &p, &mut x);
            axpy(-alpha, &ap, &mut r);
            iterations += 1;
            observe(&x);
            let rs_new = dot(&r, &r);
            let beta = rs_new / rs;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
            rs = rs_new;
        }
        let true_r = sub(b, &op(&x)?);
        let residual = norm(&true_r) / b_norm;
        if residual <= cfg.tol {
            return Ok(CgOutcome {
                x,
                iterations,
                residual,
            });
        }
        if iterations >= max_iter || restart == MAX_RESTARTS {
            return Err(Error::NoConvergence {
                iterations,
                residual,
            });
        }
        r = true_r;
    }
    unreachable!("restart loop always returns")
}
