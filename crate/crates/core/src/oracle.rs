//! Ground truth for the influence estimates: deterministic training, exact
//! and surrogate retraining after removal, the one-step Newton intermediate,
//! error decomposition, and the error bound with its estimated constants.

use serde::{Deserialize, Serialize};

use crate::contrastive::{evaluate, objective_grad, NegVariant, Objective};
use crate::data::{locate, BatchedData, PairId, PairedDataset, Seg, SegEntry, Segmentation};
use crate::error::{Error, Result, TrainFailure};
use crate::fmt17;
use crate::influence::{Curvature, HessianSpec, InfluenceEngine};
use crate::model::Encoder;
use crate::numerics::{cosine, dot, norm, spectral_norm_symmetric, sub, symmetric_eigenvalues, DetRng, Matrix};

/// Starting point of an optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    Zeros,
    /// `θ₀ = scale · N(0, I)` from `seed`.
    Jitter { seed: u64, scale: f64 },
    Warm {
        #[serde(serialize_with = "fmt17::vec")]
        theta: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub delta: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub init: Init,
    pub backtrack: f64,
    pub sufficient_decrease: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            grad_tol: 1e-7,
            max_iters: 50_000,
            init: Init::Jitter { seed: 0, scale: 1e-3 },
            backtrack: 0.5,
            sufficient_decrease: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig(format!("grad_tol must be > 0, got {}", self.grad_tol)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidConfig("backtrack factor must lie in (0, 1)".into()));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return Err(Error::InvalidConfig("sufficient-decrease constant must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn initial(&self, p: usize) -> Result<Vec<f64>> {
        match &self.init {
            Init::Zeros => Ok(vec![0.0; p]),
            Init::Jitter { seed, scale } => Ok(DetRng::new(*seed).normal_vec(p).into_iter().map(|x| scale * x).collect()),
            Init::Warm { theta } => {
                crate::numerics::ensure_len(p, theta.len())?;
                Ok(theta.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    #[serde(serialize_with = "fmt17::vec")]
    pub theta: Vec<f64>,
    #[serde(serialize_with = "fmt17::f64")]
    pub loss: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub grad_norm: f64,
    pub iterations: usize,
    /// Loss after every accepted step, starting with the initial loss.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Full-batch gradient descent on `obj` with a Barzilai-Borwein trial step
/// and Armijo backtracking.
pub fn minimize(enc: &Encoder, data: &BatchedData, obj: &Objective, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let p = enc.num_params();
    if data.batches.is_empty() {
        // pure ridge: the minimizer is the origin
        return Ok(TrainOutcome {
            theta: vec![0.0; p],
            loss: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            trace: vec![0.0],
        });
    }
    let eval = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (f, g) = evaluate(enc, t, data, obj, true)?;
        Ok((f, g.expect("gradient requested")))
    };
    let mut theta = cfg.initial(p)?;
    let (mut f, mut g) = eval(&theta)?;
    let mut gn = norm(&g);
    let mut trace = vec![f];
    let mut step = 1.0 / gn.max(1.0);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut iterations = 0;
    while gn > cfg.grad_tol {
        if iterations >= cfg.max_iters {
            return Err(Error::TrainingNoConvergence(Box::new(TrainFailure {
                best: theta,
                grad_norm: gn,
                loss: f,
                iterations,
            })));
        }
        if let Some((s, y)) = prev.take() {
            let sy = dot(&s, &y);
            if sy > 0.0 {
                step = dot(&s, &s) / sy;
            } else {
                step *= 2.0;
            }
        }
        let gg = gn * gn;
        let mut alpha = step;
        let (next, f_next, g_next) = loop {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t - alpha * d).collect();
            match eval(&cand) {
                Ok((fc, gc)) if fc <= f - cfg.sufficient_decrease * alpha * gg => break (cand, fc, gc),
                Ok(_) | Err(Error::ZeroNormEmbedding { .. }) | Err(Error::NonFiniteEvaluation(_)) => {}
                Err(e) => return Err(e),
            }
            alpha *= cfg.backtrack;
            if alpha < 1e-300 {
                return Err(Error::TrainingNoConvergence(Box::new(TrainFailure {
                    best: theta,
                    grad_norm: gn,
                    loss: f,
                    iterations,
                })));
            }
        };
        prev = Some((sub(&next, &theta), sub(&g_next, &g)));
        step = alpha;
        theta = next;
        f = f_next;
        g = g_next;
        gn = norm(&g);
        trace.push(f);
        iterations += 1;
    }
    Ok(TrainOutcome {
        theta,
        loss: f,
        grad_norm: gn,
        iterations,
        trace,
    })
}

/// Minimizes the total loss `ΣL_batch + (δ/2)‖θ‖²`.
pub fn train(enc: &Encoder, data: &BatchedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    minimize(enc, data, &Objective::total(cfg.delta), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RetrainMode {
    /// Delete the pairs from their batches and retrain.
    ExactRemoval,
    /// Minimize `L⁻ = L_total − Pos − Neg` on the original batches.
    Surrogate { variant: NegVariant },
}

/// Retrains with `removed` taken out, in the given mode.
pub fn retrain_removed(
    enc: &Encoder,
    ds: &PairedDataset,
    seg: &Segmentation,
    removed: &[PairId],
    cfg: &TrainConfig,
    mode: RetrainMode,
) -> Result<TrainOutcome> {
    for &id in removed {
        ds.get(id)?;
    }
    match mode {
        RetrainMode::ExactRemoval => {
            let data = BatchedData::new(ds, &seg.without(removed))?;
            train(enc, &data, cfg)
        }
        RetrainMode::Surrogate { variant } => {
            let data = BatchedData::new(ds, seg)?;
            let index = locate(ds, seg, removed)?;
            minimize(enc, &data, &Objective::surrogate(index, variant, cfg.delta), cfg)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    #[serde(serialize_with = "fmt17::vec")]
    pub theta: Vec<f64>,
    #[serde(serialize_with = "fmt17::f64")]
    pub residual: f64,
}

/// `θ̂ + H_δ⁻¹ ∇L'(θ̂)` with `H_δ = ∇²(ΣL_batch − Pos − Neg) + δI`.
pub fn newton_step(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg, spec: &HessianSpec, variant: NegVariant) -> Result<NewtonStep> {
    let surrogate = Objective::surrogate(index.clone(), variant, 0.0);
    let engine = InfluenceEngine::for_objective(enc, theta, data, &surrogate, spec)?;
    let g = objective_grad(enc, theta, data, &Objective::removed_part(index.clone(), variant))?;
    let s = engine.solve(&g)?;
    Ok(NewtonStep {
        theta: crate::numerics::add(theta, &s.x),
        residual: s.residual,
    })
}

/// Distances between a predicted and an actual parameter change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `‖θ_pred − θ_actual‖`
    #[serde(serialize_with = "fmt17::f64")]
    pub error: f64,
    /// `error / ‖θ_actual − θ̂‖`; absent when the actual change is zero.
    #[serde(serialize_with = "fmt17::opt_f64")]
    pub relative_error: Option<f64>,
    /// `cos(θ_pred − θ̂, θ_actual − θ̂)`.
    #[serde(serialize_with = "fmt17::f64")]
    pub cosine: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub actual_change: f64,
}

/// Cosine of two parameter changes; 1 when both vanish, 0 when one does.
pub fn change_cosine(a: &[f64], b: &[f64]) -> f64 {
    match cosine(a, b) {
        Some(c) => c,
        None if norm(a) == 0.0 && norm(b) == 0.0 => 1.0,
        None => 0.0,
    }
}

pub fn compare(theta_hat: &[f64], predicted: &[f64], actual: &[f64]) -> Result<Comparison> {
    crate::numerics::ensure_len(theta_hat.len(), predicted.len())?;
    crate::numerics::ensure_len(theta_hat.len(), actual.len())?;
    let error = norm(&sub(predicted, actual));
    let d_pred = sub(predicted, theta_hat);
    let d_act = sub(actual, theta_hat);
    let actual_change = norm(&d_act);
    let relative_error = if actual_change > 0.0 {
        Some(error / actual_change)
    } else if error == 0.0 {
        Some(0.0)
    } else {
        None
    };
    Ok(Comparison {
        error,
        relative_error,
        cosine: change_cosine(&d_pred, &d_act),
        actual_change,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    #[serde(serialize_with = "fmt17::vec")]
    pub theta_hat: Vec<f64>,
    #[serde(serialize_with = "fmt17::vec")]
    pub theta_if: Vec<f64>,
    #[serde(serialize_with = "fmt17::vec")]
    pub theta_retrain_exact: Vec<f64>,
    #[serde(serialize_with = "fmt17::vec")]
    pub theta_retrain_surrogate: Vec<f64>,
    #[serde(serialize_with = "fmt17::vec")]
    pub theta_newton: Vec<f64>,
    /// `‖θ_if − θ_retrain_exact‖`, the headline metric.
    #[serde(serialize_with = "fmt17::f64")]
    pub headline: f64,
    pub if_vs_exact: Comparison,
    pub if_vs_surrogate: Comparison,
    /// Newton step against the surrogate minimizer.
    pub newton_vs_surrogate: Comparison,
    pub newton_vs_exact: Comparison,
    /// `‖θ_if − θ_Nt‖`
    #[serde(serialize_with = "fmt17::f64")]
    pub if_vs_newton: f64,
}

pub fn error_report(
    theta_hat: &[f64],
    theta_if: &[f64],
    theta_exact: &[f64],
    theta_surrogate: &[f64],
    theta_newton: &[f64],
) -> Result<ErrorReport> {
    crate::numerics::ensure_len(theta_hat.len(), theta_newton.len())?;
    let if_vs_exact = compare(theta_hat, theta_if, theta_exact)?;
    Ok(ErrorReport {
        theta_hat: theta_hat.to_vec(),
        theta_if: theta_if.to_vec(),
        theta_retrain_exact: theta_exact.to_vec(),
        theta_retrain_surrogate: theta_surrogate.to_vec(),
        theta_newton: theta_newton.to_vec(),
        headline: if_vs_exact.error,
        if_vs_exact,
        if_vs_surrogate: compare(theta_hat, theta_if, theta_surrogate)?,
        newton_vs_surrogate: compare(theta_hat, theta_newton, theta_surrogate)?,
        newton_vs_exact: compare(theta_hat, theta_newton, theta_exact)?,
        if_vs_newton: norm(&sub(theta_if, theta_newton)),
    })
}

/// Constants of the influence error bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    #[serde(serialize_with = "fmt17::f64")]
    pub c_l_prime: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub c_h: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub c_h_prime: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub c_h_minus: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub sigma_min: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub sigma_min_prime: f64,
    #[serde(serialize_with = "fmt17::f64")]
    pub delta: f64,
    pub n_removed: usize,
    pub n_batches: usize,
    /// Lipschitz constants are sampled lower estimates, not certified.
    pub estimated: bool,
}

impl BoundConstants {
    /// Constants with `C_H⁻ = |ℬ|·C_H + |𝒟*|·C'_H` filled in.
    #[allow(clippy::too_many_arguments)]
    pub fn new(c_l_prime: f64, c_h: f64, c_h_prime: f64, sigma_min: f64, sigma_min_prime: f64, delta: f64, n_removed: usize, n_batches: usize) -> Self {
        Self {
            c_l_prime,
            c_h,
            c_h_prime,
            c_h_minus: n_batches as f64 * c_h + n_removed as f64 * c_h_prime,
            sigma_min,
            sigma_min_prime,
            delta,
            n_removed,
            n_batches,
            estimated: false,
        }
    }
}

/// `C'_H·C_H⁻·n²·C'_L² / (2(σ'+δ)³) + |(2δ+σ+σ') / ((δ+σ')(δ+σ))|·C'_L·n`.
pub fn bound_eval(bc: &BoundConstants) -> Result<f64> {
    let dp = bc.delta + bc.sigma_min_prime;
    let d = bc.delta + bc.sigma_min;
    if !(dp > 0.0) {
        return Err(Error::SingularDenominator(dp));
    }
    if !(d > 0.0) {
        return Err(Error::SingularDenominator(d));
    }
    let n = bc.n_removed as f64;
    let first = bc.c_h_prime * bc.c_h_minus * n * n * bc.c_l_prime * bc.c_l_prime / (2.0 * dp * dp * dp);
    let second = ((2.0 * bc.delta + bc.sigma_min + bc.sigma_min_prime) / (dp * d)).abs() * bc.c_l_prime * n;
    Ok(first + second)
}

/// Sample points `(θ₁, θ₂)` within `radius` of `center`. Each probe extends
/// the same stream, so a longer list has the shorter one as a prefix.
pub fn probe_points(center: &[f64], probes: usize, radius: f64, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = DetRng::new(seed);
    let point = |rng: &mut DetRng| -> Vec<f64> {
        let dir = rng.normal_vec(center.len());
        let n = norm(&dir).max(f64::MIN_POSITIVE);
        let r = radius * rng.uniform();
        center.iter().zip(&dir).map(|(c, d)| c + r * d / n).collect()
    };
    (0..probes).map(|_| (point(&mut rng), point(&mut rng))).collect()
}

/// `max ‖∇²f(θ₁) − ∇²f(θ₂)‖₂ / ‖θ₁ − θ₂‖` over the given points.
pub fn hessian_lipschitz<F>(mut hessian: F, points: &[(Vec<f64>, Vec<f64>)]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Matrix>,
{
    let mut best = 0.0f64;
    for (a, b) in points {
        let dist = norm(&sub(a, b));
        if dist == 0.0 {
            continue;
        }
        let diff = hessian(a)? - hessian(b)?;
        best = best.max(spectral_norm_symmetric(&diff) / dist);
    }
    Ok(best)
}

fn model_hessian(enc: &Encoder, theta: &[f64], data: &BatchedData, obj: &Objective, step: f64) -> Result<Matrix> {
    Ok(Curvature::new(enc, theta, data, obj, 0.0, step)?.dense()?.model)
}

/// Settings for [`estimate_constants`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub probes: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probes: 4,
            radius: 0.1,
            seed: 0,
        }
    }
}

/// Estimates every constant of the bound at `θ̂`.
///
/// `σ` values are the smallest eigenvalues of the data parts of the two
/// Hessians (the bound adds `δ` itself). `C_H` is the largest per-batch
/// estimate and `C'_H` the largest per-removed-pair estimate.
#[allow(clippy::too_many_arguments)]
pub fn estimate_constants(
    enc: &Encoder,
    theta: &[f64],
    data: &BatchedData,
    index: &Seg,
    variant: NegVariant,
    delta: f64,
    probe: &ProbeConfig,
    hvp_step: f64,
) -> Result<BoundConstants> {
    if probe.probes < 2 {
        return Err(Error::Precondition(format!("need at least 2 probes, got {}", probe.probes)));
    }
    index.validate(&data.sizes())?;
    let singles: Vec<Seg> = index
        .entries
        .iter()
        .flat_map(|e| {
            e.positions.iter().map(move |&p| Seg {
                entries: vec![SegEntry { batch: e.batch, positions: vec![p] }],
            })
        })
        .collect();

    let mut c_l_prime = 0.0f64;
    for single in &singles {
        let g = objective_grad(enc, theta, data, &Objective::removed_part(single.clone(), variant))?;
        c_l_prime = c_l_prime.max(norm(&g));
    }

    let smallest = |m: &Matrix| symmetric_eigenvalues(m).first().copied().unwrap_or(0.0);
    let sigma_min = smallest(&model_hessian(enc, theta, data, &Objective::total(0.0), hvp_step)?);
    let sigma_min_prime = smallest(&model_hessian(enc, theta, data, &Objective::surrogate(index.clone(), variant, 0.0), hvp_step)?);

    let points = probe_points(theta, probe.probes, probe.radius, probe.seed);
    let mut c_h = 0.0f64;
    for batch in &data.batches {
        let one = BatchedData {
            batches: vec![batch.clone()],
            segmentation: Segmentation::new(vec![batch.ids.clone()]),
        };
        let total = Objective::total(0.0);
        c_h = c_h.max(hessian_lipschitz(|t| model_hessian(enc, t, &one, &total, hvp_step), &points)?);
    }
    let mut c_h_prime = 0.0f64;
    for single in &singles {
        let part = Objective::removed_part(single.clone(), variant);
        c_h_prime = c_h_prime.max(hessian_lipschitz(|t| model_hessian(enc, t, data, &part, hvp_step), &points)?);
    }

    let mut bc = BoundConstants::new(
        c_l_prime,
        c_h,
        c_h_prime,
        sigma_min,
        sigma_min_prime,
        delta,
        singles.len(),
        data.batches.len(),
    );
    bc.estimated = true;
    Ok(bc)
}
