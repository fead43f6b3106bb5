//! Symmetric contrastive loss over a batch similarity matrix, the positive
//! and negative influence terms of a located subset, the ζ-weighted loss,
//! and their gradients.
//!
//! Matrix-level functions take `S` directly. The parameter-level functions
//! run the encoder over a [`BatchedData`] and backpropagate through it.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchedData, Seg};
use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::numerics::{axpy, dot, Matrix};

/// How a removed pair's role as a negative is scored.
///
/// With `q_k = Σ_{n∈E} softmax(S_k·)_n` (and `c_k` the column analog) for
/// every remaining index `k`:
/// * `FirstOrder`: `Σ_k q_k + c_k`, the ζ-derivative of the reweighted loss.
/// * `Paper`: `Σ_k 1/q_k + 1/c_k`, the per-term reciprocal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegVariant {
    Paper,
    #[default]
    FirstOrder,
}

impl NegVariant {
    pub const ALL: [NegVariant; 2] = [NegVariant::FirstOrder, NegVariant::Paper];

    pub fn as_str(&self) -> &'static str {
        match self {
            NegVariant::Paper => "paper",
            NegVariant::FirstOrder => "first_order",
        }
    }
}

impl fmt::Display for NegVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(NegVariant::Paper),
            "first_order" | "first-order" => Ok(NegVariant::FirstOrder),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

/// Row and column softmax of `S` with their log-normalizers.
#[derive(Debug, Clone)]
pub struct Softmax {
    pub row: Matrix,
    pub col: Matrix,
    pub row_lse: Vec<f64>,
    pub col_lse: Vec<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Softmax {
    pub fn new(s: &Matrix) -> Self {
        let n = s.nrows();
        debug_assert_eq!(n, s.ncols());
        let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(s.row(i).iter().copied())).collect();
        let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp(s.column(j).iter().copied())).collect();
        let row = Matrix::from_fn(n, n, |i, j| (s[(i, j)] - row_lse[i]).exp());
        let col = Matrix::from_fn(n, n, |i, j| (s[(i, j)] - col_lse[j]).exp());
        Self {
            row,
            col,
            row_lse,
            col_lse,
        }
    }

    fn len(&self) -> usize {
        self.row_lse.len()
    }

    /// Softmax mass the indices in `e` take in row `k` and in column `k`.
    fn shares(&self, e: &[usize], k: usize) -> (f64, f64) {
        let q = e.iter().map(|&n| self.row[(k, n)]).sum();
        let c = e.iter().map(|&n| self.col[(n, k)]).sum();
        (q, c)
    }
}

fn complement(n: usize, e: &[usize]) -> impl Iterator<Item = usize> + '_ {
    (0..n).filter(move |k| e.binary_search(k).is_err())
}

fn check_index(s: &Matrix, i: usize) -> Result<()> {
    if i < s.nrows() {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { index: i, size: s.nrows() })
    }
}

/// Text-to-image loss of row `i`: `−log softmax(S_i·)_i`.
pub fn t2i_row(s: &Matrix, i: usize) -> Result<f64> {
    check_index(s, i)?;
    Ok(log_sum_exp(s.row(i).iter().copied()) - s[(i, i)])
}

/// Image-to-text loss of column `i`: `−log softmax(S_·i)_i`.
pub fn i2t_col(s: &Matrix, i: usize) -> Result<f64> {
    check_index(s, i)?;
    Ok(log_sum_exp(s.column(i).iter().copied()) - s[(i, i)])
}

/// `Σ_i t2i_row(S, i) + i2t_col(S, i)`.
pub fn batch_loss(s: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..s.nrows() {
        total += t2i_row(s, i).expect("index in range");
        total += i2t_col(s, i).expect("index in range");
    }
    total
}

/// Pairing losses of the positions in `e`.
pub fn pos_batch(s: &Matrix, e: &[usize]) -> f64 {
    e.iter()
        .map(|&n| t2i_row(s, n).expect("validated position") + i2t_col(s, n).expect("validated position"))
        .sum()
}

pub fn neg_batch(s: &Matrix, e: &[usize], variant: NegVariant) -> f64 {
    if e.is_empty() {
        return 0.0;
    }
    let sm = Softmax::new(s);
    complement(sm.len(), e)
        .map(|k| {
            let (q, c) = sm.shares(e, k);
            match variant {
                NegVariant::FirstOrder => q + c,
                NegVariant::Paper => 1.0 / q + 1.0 / c,
            }
        })
        .sum()
}

/// Batch loss with every remaining denominator's `E` mass scaled by `ζ`.
pub fn zeta_batch(s: &Matrix, e: &[usize], zeta: f64) -> Result<f64> {
    let base = batch_loss(s);
    if e.is_empty() {
        return Ok(base);
    }
    let sm = Softmax::new(s);
    let mut extra = 0.0;
    for k in complement(sm.len(), e) {
        let (q, c) = sm.shares(e, k);
        for share in [q, c] {
            let factor = 1.0 + (zeta - 1.0) * share;
            if !(factor > 0.0) {
                return Err(Error::NonPositiveDenominator(factor));
            }
            extra += ((zeta - 1.0) * share).ln_1p();
        }
    }
    Ok(base + extra)
}

/// Loss with the `E` members dropped from every denominator where they act
/// as negatives, their own pairing losses kept.
pub fn removed_negative_batch(s: &Matrix, e: &[usize]) -> f64 {
    let n = s.nrows();
    let keep: Vec<usize> = complement(n, e).collect();
    let mut total = 0.0;
    for &k in &keep {
        total += log_sum_exp(keep.iter().map(|&j| s[(k, j)])) - s[(k, k)];
        total += log_sum_exp(keep.iter().map(|&j| s[(j, k)])) - s[(k, k)];
    }
    total + pos_batch(s, e)
}

/// `∂ batch_loss / ∂S = (P_row − I) + (P_col − I)`.
pub fn batch_loss_grad(sm: &Softmax) -> Matrix {
    let n = sm.len();
    let mut g = &sm.row + &sm.col;
    for i in 0..n {
        g[(i, i)] -= 2.0;
    }
    g
}

pub fn pos_grad(sm: &Softmax, e: &[usize]) -> Matrix {
    let n = sm.len();
    let mut g = Matrix::zeros(n, n);
    for &p in e {
        for j in 0..n {
            g[(p, j)] += sm.row[(p, j)];
            g[(j, p)] += sm.col[(j, p)];
        }
        g[(p, p)] -= 2.0;
    }
    g
}

pub fn neg_grad(sm: &Softmax, e: &[usize], variant: NegVariant) -> Matrix {
    let n = sm.len();
    let mut g = Matrix::zeros(n, n);
    if e.is_empty() {
        return g;
    }
    let in_e: Vec<f64> = (0..n).map(|j| if e.binary_search(&j).is_ok() { 1.0 } else { 0.0 }).collect();
    for k in complement(n, e) {
        let (q, c) = sm.shares(e, k);
        let (wq, wc) = match variant {
            NegVariant::FirstOrder => (1.0, 1.0),
            NegVariant::Paper => (-1.0 / (q * q), -1.0 / (c * c)),
        };
        for j in 0..n {
            g[(k, j)] += wq * sm.row[(k, j)] * (in_e[j] - q);
            g[(j, k)] += wc * sm.col[(j, k)] * (in_e[j] - c);
        }
    }
    g
}

/// Weighted combination `a·ΣL_batch + b·Pos + c·Neg + (δ/2)‖θ‖²`.
///
/// Every scalar loss the toolkit optimizes or differentiates is one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub batch_weight: f64,
    pub pos_weight: f64,
    pub neg_weight: f64,
    pub variant: NegVariant,
    pub index: Seg,
    pub delta: f64,
}

impl Objective {
    /// `ΣL_batch + (δ/2)‖θ‖²`.
    pub fn total(delta: f64) -> Self {
        Self {
            batch_weight: 1.0,
            pos_weight: 0.0,
            neg_weight: 0.0,
            variant: NegVariant::default(),
            index: Seg::default(),
            delta,
        }
    }

    pub fn pos(index: Seg) -> Self {
        Self {
            batch_weight: 0.0,
            pos_weight: 1.0,
            index,
            ..Self::total(0.0)
        }
    }

    pub fn neg(index: Seg, variant: NegVariant) -> Self {
        Self {
            batch_weight: 0.0,
            neg_weight: 1.0,
            variant,
            index,
            ..Self::total(0.0)
        }
    }

    /// `L' = Pos + Neg`, the part attributed to the subset.
    pub fn removed_part(index: Seg, variant: NegVariant) -> Self {
        Self {
            batch_weight: 0.0,
            pos_weight: 1.0,
            neg_weight: 1.0,
            variant,
            index,
            delta: 0.0,
        }
    }

    /// `L⁻ = L_total − Pos − Neg`.
    pub fn surrogate(index: Seg, variant: NegVariant, delta: f64) -> Self {
        Self {
            batch_weight: 1.0,
            pos_weight: -1.0,
            neg_weight: -1.0,
            variant,
            index,
            delta,
        }
    }

    /// Same objective without the ridge.
    pub fn without_ridge(&self) -> Self {
        Self {
            delta: 0.0,
            ..self.clone()
        }
    }

    fn touches(&self, batch: usize) -> bool {
        self.batch_weight != 0.0 || self.index.positions_in(batch).is_some()
    }
}

/// Value and optional gradient of `obj` at `θ`.
///
/// Batches are evaluated in parallel and reduced in batch order, so the
/// result does not depend on the thread count.
pub fn evaluate(enc: &Encoder, theta: &[f64], data: &BatchedData, obj: &Objective, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    enc.layout().check(theta.len())?;
    obj.index.validate(&data.sizes())?;
    let p = theta.len();
    let per_batch: Vec<(f64, Option<Vec<f64>>)> = data
        .batches
        .par_iter()
        .enumerate()
        .filter(|(m, _)| obj.touches(*m))
        .map(|(m, batch)| -> Result<(f64, Option<Vec<f64>>)> {
            let e = obj.index.positions_in(m).unwrap_or(&[]);
            let fwd = enc.forward(theta, batch)?;
            let s = &fwd.s;
            let mut value = 0.0;
            if obj.batch_weight != 0.0 {
                value += obj.batch_weight * batch_loss(s);
            }
            if obj.pos_weight != 0.0 {
                value += obj.pos_weight * pos_batch(s, e);
            }
            if obj.neg_weight != 0.0 {
                value += obj.neg_weight * neg_batch(s, e, obj.variant);
            }
            if !want_grad {
                return Ok((value, None));
            }
            let sm = Softmax::new(s);
            let n = batch.len();
            let mut g = Matrix::zeros(n, n);
            if obj.batch_weight != 0.0 {
                g += batch_loss_grad(&sm) * obj.batch_weight;
            }
            if obj.pos_weight != 0.0 && !e.is_empty() {
                g += pos_grad(&sm, e) * obj.pos_weight;
            }
            if obj.neg_weight != 0.0 && !e.is_empty() {
                g += neg_grad(&sm, e, obj.variant) * obj.neg_weight;
            }
            let mut grad = vec![0.0; p];
            enc.backward_similarity(theta, batch, &fwd, &g, &mut grad)?;
            Ok((value, Some(grad)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut value = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; p]);
    for (v, g) in per_batch {
        value += v;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            axpy(1.0, &g, acc);
        }
    }
    if obj.delta != 0.0 {
        value += 0.5 * obj.delta * dot(theta, theta);
        if let Some(acc) = grad.as_mut() {
            axpy(obj.delta, theta, acc);
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteEvaluation(format!("objective value {value}")));
    }
    Ok((value, grad))
}

pub fn objective_value(enc: &Encoder, theta: &[f64], data: &BatchedData, obj: &Objective) -> Result<f64> {
    Ok(evaluate(enc, theta, data, obj, false)?.0)
}

pub fn objective_grad(enc: &Encoder, theta: &[f64], data: &BatchedData, obj: &Objective) -> Result<Vec<f64>> {
    Ok(evaluate(enc, theta, data, obj, true)?.1.expect("gradient requested"))
}

/// `Σ_batches L_batch + (δ/2)‖θ‖²`.
pub fn total_loss(enc: &Encoder, theta: &[f64], data: &BatchedData, delta: f64) -> Result<f64> {
    if delta < 0.0 {
        return Err(Error::InvalidConfig(format!("delta must be >= 0, got {delta}")));
    }
    objective_value(enc, theta, data, &Objective::total(delta))
}

pub fn pos_term(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg) -> Result<f64> {
    objective_value(enc, theta, data, &Objective::pos(index.clone()))
}

pub fn neg_term(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg, variant: NegVariant) -> Result<f64> {
    objective_value(enc, theta, data, &Objective::neg(index.clone(), variant))
}

fn per_touched_batch<F>(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg, f: F) -> Result<f64>
where
    F: Fn(&Matrix, &[usize]) -> Result<f64>,
{
    index.validate(&data.sizes())?;
    let mut total = 0.0;
    for entry in &index.entries {
        let s = enc.similarity_matrix(theta, &data.batches[entry.batch])?;
        total += f(&s, &entry.positions)?;
    }
    Ok(total)
}

/// ζ-reweighted loss summed over the batches the index touches.
pub fn zeta_weighted_loss(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg, zeta: f64) -> Result<f64> {
    per_touched_batch(enc, theta, data, index, |s, e| zeta_batch(s, e, zeta))
}

/// Removed-negative loss summed over the batches the index touches.
pub fn removed_negative_loss(enc: &Encoder, theta: &[f64], data: &BatchedData, index: &Seg) -> Result<f64> {
    per_touched_batch(enc, theta, data, index, |s, e| Ok(removed_negative_batch(s, e)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "term")]
pub enum Term {
    Total { delta: f64 },
    Pos { index: Seg },
    Neg { index: Seg, variant: NegVariant },
}

impl Term {
    pub fn objective(&self) -> Objective {
        match self {
            Term::Total { delta } => Objective::total(*delta),
            Term::Pos { index } => Objective::pos(index.clone()),
            Term::Neg { index, variant } => Objective::neg(index.clone(), *variant),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermGradient {
    pub term: Term,
    pub grad: Vec<f64>,
    pub value: f64,
}

pub fn term_gradient(enc: &Encoder, theta: &[f64], data: &BatchedData, term: Term) -> Result<TermGradient> {
    let (value, grad) = evaluate(enc, theta, data, &term.objective(), true)?;
    let grad = grad.expect("gradient requested");
    crate::numerics::ensure_finite("gradient", &grad)?;
    Ok(TermGradient { term, grad, value })
}
