//! Damped Hessians, inverse-Hessian solves, and the positive/negative
//! influence vectors of a located subset.
//!
//! `H = ∇²ΣL_batch(θ̂) + δI`. Hessian-vector products difference the analytic
//! gradient; the `δI` block is always added exactly.

use nalgebra::Cholesky;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{objective_grad, NegVariant, Objective};
use crate::data::{BatchedData, Seg};
use crate::error::{Error, Result};
use crate::fmt17;
use crate::model::Encoder;
use crate::numerics::{
    cg_solve, dot, ensure_finite, norm, norm_inf, symmetric_eigenvalues, CgConfig, Matrix, DENSE_EIGEN_LIMIT,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Materialize `H` and factor it once (`p ≤ 200`).
    #[default]
    Dense,
    /// Matrix-free conjugate gradient on Hessian-vector products.
    HvpCg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianSpec {
    pub delta: f64,
    pub mode: HessianMode,
    /// Relative step of the differenced Hessian-vector product.
    pub hvp_step: f64,
    pub cg: CgConfig,
}

impl Default for HessianSpec {
    fn default() -> Self {
        Self {
            delta: 1.0,
            mode: HessianMode::Dense,
            hvp_step: 1e-5,
            cg: CgConfig::default(),
        }
    }
}

impl HessianSpec {
    pub fn with_delta(delta: f64) -> Self {
        Self {
            delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.hvp_step > 0.0) {
            return Err(Error::InvalidConfig(format!("hvp_step must be > 0, got {}", self.hvp_step)));
        }
        self.cg.validate()
    }
}

/// Curvature of a ridge-free objective at a fixed point, plus `δI`.
#[derive(Debug, Clone)]
pub struct Curvature<'a> {
    enc: &'a Encoder,
    theta: &'a [f64],
    data: &'a BatchedData,
    model: Objective,
    delta: f64,
    hvp_step: f64,
}

/// A materialized Hessian and how asymmetric the raw differences were.
#[derive(Debug, Clone)]
pub struct DenseHessian {
    /// Symmetrized model part plus `δI`.
    pub matrix: Matrix,
    /// Symmetrized model part alone.
    pub model: Matrix,
    /// Max-abs entry of `M − Mᵀ` before symmetrization.
    pub asymmetry: f64,
}

impl<'a> Curvature<'a> {
    /// `∇²(objective without its ridge) + δI`.
    pub fn new(enc: &'a Encoder, theta: &'a [f64], data: &'a BatchedData, objective: &Objective, delta: f64, hvp_step: f64) -> Result<Self> {
        enc.layout().check(theta.len())?;
        Ok(Self {
            enc,
            theta,
            data,
            model: objective.without_ridge(),
            delta,
            hvp_step,
        })
    }

    /// Curvature of the total loss.
    pub fn total(enc: &'a Encoder, theta: &'a [f64], data: &'a BatchedData, spec: &HessianSpec) -> Result<Self> {
        Self::new(enc, theta, data, &Objective::total(0.0), spec.delta, spec.hvp_step)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn model_hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let scale = norm_inf(v);
        if !(scale > 0.0) {
            return Err(Error::Precondition("hvp direction must be nonzero".into()));
        }
        let h = self.hvp_step * (1.0 + norm_inf(self.theta)) / scale;
        let shifted = |sign: f64| -> Vec<f64> { self.theta.iter().zip(v).map(|(t, d)| t + sign * h * d).collect() };
        let gp = objective_grad(self.enc, &shifted(1.0), self.data, &self.model)?;
        let gm = objective_grad(self.enc, &shifted(-1.0), self.data, &self.model)?;
        let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        ensure_finite("hessian-vector product", &out)?;
        Ok(out)
    }

    /// `H·v`.
    pub fn hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.model_hvp(v)?;
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.delta * x;
        }
        Ok(out)
    }

    pub fn dense(&self) -> Result<DenseHessian> {
        let p = self.dim();
        if p > DENSE_EIGEN_LIMIT {
            return Err(Error::DimensionTooLarge { dim: p, max: DENSE_EIGEN_LIMIT });
        }
        let cols: Vec<Vec<f64>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                self.model_hvp(&e)
            })
            .collect::<Result<_>>()?;
        let raw = Matrix::from_fn(p, p, |i, j| cols[j][i]);
        let asymmetry = (&raw - raw.transpose()).amax();
        let model = (&raw + raw.transpose()) * 0.5;
        let matrix = &model + Matrix::identity(p, p) * self.delta;
        Ok(DenseHessian { matrix, model, asymmetry })
    }
}

/// `H` of the total loss at `θ̂`, materialized.
pub fn dense_hessian(enc: &Encoder, theta: &[f64], data: &BatchedData, spec: &HessianSpec) -> Result<DenseHessian> {
    Curvature::total(enc, theta, data, spec)?.dense()
}

pub fn hvp(enc: &Encoder, theta: &[f64], data: &BatchedData, spec: &HessianSpec, v: &[f64]) -> Result<Vec<f64>> {
    Curvature::total(enc, theta, data, spec)?.hvp(v)
}

#[derive(Debug, Clone)]
pub struct Solve {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

enum Backend {
    Dense { h: Matrix, chol: Cholesky<f64, nalgebra::Dyn> },
    Cg,
}

/// Inverse-Hessian solver bound to one `(θ̂, data, objective)`.
///
/// Dense mode factors `H` once, so many influence queries against the same
/// model cost one triangular solve each.
pub struct InfluenceEngine<'a> {
    curvature: Curvature<'a>,
    spec: HessianSpec,
    backend: Backend,
}

impl<'a> InfluenceEngine<'a> {
    /// Engine for the ECIF Hessian `∇²ΣL_batch + δI`.
    pub fn new(enc: &'a Encoder, theta: &'a [f64], data: &'a BatchedData, spec: &HessianSpec) -> Result<Self> {
        Self::for_objective(enc, theta, data, &Objective::total(0.0), spec)
    }

    /// Engine for `∇²(objective) + δI`.
    pub fn for_objective(enc: &'a Encoder, theta: &'a [f64], data: &'a BatchedData, objective: &Objective, spec: &HessianSpec) -> Result<Self> {
        spec.validate()?;
        let curvature = Curvature::new(enc, theta, data, objective, spec.delta, spec.hvp_step)?;
        let backend = match spec.mode {
            HessianMode::HvpCg => Backend::Cg,
            HessianMode::Dense => {
                let mut h = curvature.dense()?.matrix;
                for i in 0..h.nrows() {
                    h[(i, i)] += spec.cg.extra_damping;
                }
                match Cholesky::new(h.clone()) {
                    Some(chol) => Backend::Dense { h, chol },
                    None => {
                        let lambda = symmetric_eigenvalues(&h).first().copied().unwrap_or(0.0);
                        return Err(Error::NegativeCurvature {
                            iteration: 0,
                            curvature: lambda,
                        });
                    }
                }
            }
        };
        Ok(Self { curvature, spec: *spec, backend })
    }

    pub fn spec(&self) -> &HessianSpec {
        &self.spec
    }

    pub fn curvature(&self) -> &Curvature<'a> {
        &self.curvature
    }

    /// The factored matrix, in dense mode.
    pub fn matrix(&self) -> Option<&Matrix> {
        match &self.backend {
            Backend::Dense { h, .. } => Some(h),
            Backend::Cg => None,
        }
    }

    /// `H⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Result<Solve> {
        self.curvature.enc.layout().check(b.len())?;
        if b.iter().all(|&x| x == 0.0) {
            return Ok(Solve {
                x: vec![0.0; b.len()],
                residual: 0.0,
                iterations: 0,
            });
        }
        match &self.backend {
            Backend::Dense { h, chol } => {
                let rhs = nalgebra::DVector::from_column_slice(b);
                let x = chol.solve(&rhs);
                let r = h * &x - &rhs;
                Ok(Solve {
                    x: x.iter().copied().collect(),
                    residual: r.norm() / rhs.norm(),
                    iterations: 1,
                })
            }
            Backend::Cg => {
                let out = cg_solve(|v| self.curvature.hvp(v), b, &self.spec.cg)?;
                Ok(Solve {
                    x: out.x,
                    residual: out.residual,
                    iterations: out.iterations,
                })
            }
        }
    }

    fn minus_inverse(&self, objective: &Objective) -> Result<Solve> {
        let c = &self.curvature;
        let g = objective_grad(c.enc, c.theta, c.data, objective)?;
        let mut s = self.solve(&g)?;
        for x in &mut s.x {
            *x = -*x;
        }
        Ok(s)
    }

    /// `−H⁻¹ ∇Pos`.
    pub fn positive_if(&self, index: &Seg) -> Result<Solve> {
        self.minus_inverse(&Objective::pos(index.clone()))
    }

    /// `−H⁻¹ ∇Neg`.
    pub fn negative_if(&self, index: &Seg, variant: NegVariant) -> Result<Solve> {
        self.minus_inverse(&Objective::neg(index.clone(), variant))
    }

    pub fn ecif(&self, index: &Seg, variant: NegVariant) -> Result<InfluenceVectors> {
        let pos = self.positive_if(index)?;
        let neg = self.negative_if(index, variant)?;
        ensure_finite("positive influence", &pos.x)?;
        ensure_finite("negative influence", &neg.x)?;
        Ok(InfluenceVectors {
            pos_if: pos.x,
            neg_if: neg.x,
            variant,
            residual_pos: pos.residual,
            residual_neg: neg.residual,
            delta: self.spec.delta,
            iterations_pos: pos.iterations,
            iterations_neg: neg.iterations,
        })
    }
}

/// The positive- and negative-sample influence of a subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceVectors {
    #[serde(serialize_with = "fmt17::vec")]
    pub pos_if: Vec<f64>,
    #[serde(serialize_with = "fmt17::vec")]
    pub neg_if: Vec<f64>,
    pub variant: NegVariant,
    #[serde(serialize_with = "fmt17::f64")]
    pub residual_pos: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub residual_neg: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub delta: f64,
    #[serde(default)]
    pub iterations_pos: usize,
    #[serde(default)]
    pub iterations_neg: usize,
}

impl InfluenceVectors {
    pub fn zeros(p: usize, variant: NegVariant, delta: f64) -> Self {
        Self {
            pos_if: vec![0.0; p],
            neg_if: vec![0.0; p],
            variant,
            residual_pos: 0.0,
            residual_neg: 0.0,
            delta,
            iterations_pos: 0,
            iterations_neg: 0,
        }
    }

    /// `pos_if + neg_if`.
    pub fn combined(&self) -> Vec<f64> {
        crate::numerics::add(&self.pos_if, &self.neg_if)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("influence vectors serialize");
        s.push('\n');
        s
    }
}

pub fn positive_if(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg, spec: &HessianSpec) -> Result<Vec<f64>> {
    Ok(InfluenceEngine::new(enc, theta, data, spec)?.positive_if(index)?.x)
}

pub fn negative_if(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg, spec: &HessianSpec, variant: NegVariant) -> Result<Vec<f64>> {
    Ok(InfluenceEngine::new(enc, theta, data, spec)?.negative_if(index, variant)?.x)
}

pub fn ecif(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg, spec: &HessianSpec, variant: NegVariant) -> Result<InfluenceVectors> {
    InfluenceEngine::new(enc, theta, data, spec)?.ecif(index, variant)
}

/// `θ̂ + ε·pos_if + (ζ−1)·neg_if`. Removal is `(ε, ζ) = (−1, 0)`.
pub fn edit_params(theta: &[f64], iv: &InfluenceVectors, eps: f64, zeta: f64) -> Result<Vec<f64>> {
    crate::numerics::ensure_len(theta.len(), iv.pos_if.len())?;
    crate::numerics::ensure_len(theta.len(), iv.neg_if.len())?;
    Ok(theta
        .iter()
        .zip(iv.pos_if.iter().zip(&iv.neg_if))
        .map(|(t, (p, n))| {
            let step = eps * p + (zeta - 1.0) * n;
            if step == 0.0 {
                *t
            } else {
                t + step
            }
        })
        .collect())
}

/// Low-rank input and output projections of a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    /// `r_i × d_in`
    pub p_i: Matrix,
    /// `r_o × d_out`
    pub p_o: Matrix,
}

impl ProjectionPair {
    pub fn new(p_i: Matrix, p_o: Matrix) -> Result<Self> {
        if p_i.nrows() > p_i.ncols() || p_o.nrows() > p_o.ncols() {
            return Err(Error::InvalidConfig("projection rank exceeds its input dimension".into()));
        }
        Ok(Self { p_i, p_o })
    }
}

/// `(P_i ⊗ P_o) vec(Σ_t x_t ⊗ g_t)` computed as `Σ_t P_i x_t ⊗ P_o g_t`,
/// never forming the Kronecker matrix.
pub fn logra_project(inputs: &[Vec<f64>], out_grads: &[Vec<f64>], proj: &ProjectionPair) -> Result<Vec<f64>> {
    if inputs.len() != out_grads.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            found: out_grads.len(),
            line: None,
        });
    }
    if inputs.is_empty() {
        return Err(Error::Precondition("need at least one (input, output-gradient) pair".into()));
    }
    let (ri, ro) = (proj.p_i.nrows(), proj.p_o.nrows());
    let mut out = vec![0.0; ri * ro];
    for (x, g) in inputs.iter().zip(out_grads) {
        crate::numerics::ensure_len(proj.p_i.ncols(), x.len())?;
        crate::numerics::ensure_len(proj.p_o.ncols(), g.len())?;
        let a = &proj.p_i * nalgebra::DVector::from_column_slice(x);
        let b = &proj.p_o * nalgebra::DVector::from_column_slice(g);
        for i in 0..ri {
            for j in 0..ro {
                out[i * ro + j] += a[i] * b[j];
            }
        }
    }
    Ok(out)
}

/// Relative residual of `H x = b` checked against an independent `H·x`.
pub fn residual_check(curv: &Curvature<'_>, x: &[f64], b: &[f64]) -> Result<f64> {
    let hx = curv.hvp(x)?;
    let r: Vec<f64> = hx.iter().zip(b).map(|(a, c)| a - c).collect();
    Ok(norm(&r) / norm(b))
}

/// `uᵀ H v − vᵀ H u`, a symmetry probe.
pub fn symmetry_defect(curv: &Curvature<'_>, u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(dot(u, &curv.hvp(v)?) - dot(v, &curv.hvp(u)?))
}
