//! Influence scores built on the two ECIF vectors: task-related, self and
//! relative scores, with ranking and the CSV report.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{evaluate, NegVariant, Objective};
use crate::data::{locate, Batch, BatchedData, PairId, PairedDataset, Segmentation};
use crate::error::{Error, Result};
use crate::fmt17;
use crate::influence::{InfluenceEngine, InfluenceVectors};
use crate::model::Encoder;
use crate::numerics::{add, dot, ensure_len, norm, Matrix};

/// Recorded with every score: the score predicts the test-loss change
/// caused by removing the pair, so negative scores mark harmful data.
pub const SIGN_CONVENTION: &str = "IS=-C'(pos_if+neg_if);negative=harmful";

/// Default tolerance of the normalized Gram-determinant parallel test.
pub const PARALLEL_TOL: f64 = 1e-10;

pub const CSV_HEADER: &str = "pair_id,kind,score,variant,sign_convention";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    TaskIs,
    SelfIs,
    RelativeIs,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::TaskIs => "task_is",
            ScoreKind::SelfIs => "self_is",
            ScoreKind::RelativeIs => "relative_is",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_is" => Ok(ScoreKind::TaskIs),
            "self_is" => Ok(ScoreKind::SelfIs),
            "relative_is" => Ok(ScoreKind::RelativeIs),
            other => Err(Error::InvalidConfig(format!("unknown score kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: PairId,
    #[serde(serialize_with = "fmt17::f64")]
    pub score: f64,
    pub kind: ScoreKind,
    pub sign_convention: String,
    pub variant: NegVariant,
    pub test_set: String,
}

impl ScoreRecord {
    pub fn new(pair_id: PairId, score: f64, kind: ScoreKind, variant: NegVariant, test_set: impl Into<String>) -> Self {
        Self {
            pair_id,
            score,
            kind,
            sign_convention: SIGN_CONVENTION.to_string(),
            variant,
            test_set: test_set.into(),
        }
    }
}

/// `C = Σ_b ∇L_batch(b)` over the test batches.
pub fn test_gradient_batch(enc: &Encoder, theta: &[f64], test: &BatchedData) -> Result<Vec<f64>> {
    if let Some(batch) = test.batches.iter().position(|b| b.ids.len() < 2) {
        return Err(Error::SingletonTestBatch { batch });
    }
    if test.batches.is_empty() {
        enc.layout().check(theta.len())?;
        return Ok(vec![0.0; theta.len()]);
    }
    let (_, g) = evaluate(enc, theta, test, &Objective::total(0.0), true)?;
    Ok(g.expect("gradient requested"))
}

/// Summed batch loss of the test data, without the ridge.
pub fn test_loss_batch(enc: &Encoder, theta: &[f64], test: &BatchedData) -> Result<f64> {
    if test.batches.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(enc, theta, test, &Objective::total(0.0), false)?.0)
}

/// `(1/|D'|) Σ −log cos(u_i, v_i)` and its gradient.
pub fn self_loss(enc: &Encoder, theta: &[f64], pairs: &PairedDataset, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let mut grad = want_grad.then(|| vec![0.0; theta.len()]);
    if pairs.is_empty() {
        enc.layout().check(theta.len())?;
        return Ok((0.0, grad));
    }
    let refs: Vec<_> = pairs.pairs().iter().collect();
    let batch = Batch::from_pairs(&refs, pairs.d_t(), pairs.d_i());
    let fwd = enc.forward(theta, &batch)?;
    let n = batch.ids.len();
    let (ut, vi) = (fwd.unit_text(), fwd.unit_image());
    let mut loss = 0.0;
    let mut cosines = Vec::with_capacity(n);
    for i in 0..n {
        let c = ut.row(i).dot(&vi.row(i));
        if !(c > 0.0) {
            return Err(Error::NonPositiveCosine {
                pair_id: batch.ids[i],
                cosine: c,
            });
        }
        loss -= c.ln();
        cosines.push(c);
    }
    loss /= n as f64;
    if let Some(g) = grad.as_mut() {
        let k = ut.ncols();
        let mut du = Matrix::zeros(n, k);
        let mut dv = Matrix::zeros(n, k);
        for i in 0..n {
            let w = -1.0 / (cosines[i] * n as f64);
            du.set_row(i, &(vi.row(i) * w));
            dv.set_row(i, &(ut.row(i) * w));
        }
        enc.backward(theta, &batch, &fwd, &du, &dv, 0.0, g)?;
    }
    Ok((loss, grad))
}

/// Gradient of the averaged negative log-cosine of the given pairs.
pub fn test_gradient_self(enc: &Encoder, theta: &[f64], pairs: &PairedDataset) -> Result<Vec<f64>> {
    Ok(self_loss(enc, theta, pairs, true)?.1.expect("gradient requested"))
}

/// `IS = −Cᵀ(pos_if + neg_if)`.
pub fn task_related_is(c: &[f64], iv: &InfluenceVectors) -> Result<f64> {
    ensure_len(c.len(), iv.pos_if.len())?;
    ensure_len(c.len(), iv.neg_if.len())?;
    Ok(-dot(c, &add(&iv.pos_if, &iv.neg_if)))
}

/// `|CᵀPC| / ‖C‖` with `P` the projector onto `span{pos_if, neg_if}`. Nearly
/// parallel influence vectors use `|Cᵀneg_if| / ‖neg_if‖` instead.
pub fn relative_is(c: &[f64], iv: &InfluenceVectors, parallel_tol: f64) -> Result<f64> {
    ensure_len(c.len(), iv.pos_if.len())?;
    ensure_len(c.len(), iv.neg_if.len())?;
    let cn = norm(c);
    if cn == 0.0 {
        return Err(Error::ZeroTestGradient);
    }
    let (a, b) = (&iv.pos_if, &iv.neg_if);
    let aa = dot(a, a);
    let bb = dot(b, b);
    let ab = dot(a, b);
    let det = aa * bb - ab * ab;
    if det <= parallel_tol * aa * bb {
        let dir = if bb > 0.0 {
            b
        } else if aa > 0.0 {
            a
        } else {
            return Ok(0.0);
        };
        return Ok(dot(c, dir).abs() / norm(dir));
    }
    // Cᵀ I (IᵀI)⁻¹ Iᵀ C with the 2×2 inverse written out
    let ca = dot(c, a);
    let cb = dot(c, b);
    let quad = (bb * ca * ca - 2.0 * ab * ca * cb + aa * cb * cb) / det;
    Ok(quad.abs() / cn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Asc,
    Desc,
}

/// The first `k` records by score; ties go to the smaller pair id.
pub fn rank_pairs(records: &[ScoreRecord], order: Order, k: usize) -> Result<Vec<ScoreRecord>> {
    if let Some(first) = records.first() {
        if records.iter().any(|r| r.kind != first.kind) {
            return Err(Error::MixedKinds);
        }
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|x, y| {
        let by_score = match order {
            Order::Asc => x.score.total_cmp(&y.score),
            Order::Desc => y.score.total_cmp(&x.score),
        };
        by_score.then(x.pair_id.cmp(&y.pair_id))
    });
    sorted.truncate(k);
    Ok(sorted)
}

/// ECIF of each listed pair removed on its own.
pub fn pair_influences(engine: &InfluenceEngine, ds: &PairedDataset, seg: &Segmentation, ids: &[PairId], variant: NegVariant) -> Result<Vec<InfluenceVectors>> {
    ids.par_iter()
        .map(|&id| {
            let index = locate(ds, seg, &[id])?;
            engine.ecif(&index, variant)
        })
        .collect()
}

/// Scores every pair against one test gradient `C`.
pub fn score_with(
    c: &[f64],
    ids: &[PairId],
    influences: &[InfluenceVectors],
    kind: ScoreKind,
    variant: NegVariant,
    test_set: &str,
) -> Result<Vec<ScoreRecord>> {
    ensure_len(ids.len(), influences.len())?;
    ids.iter()
        .zip(influences)
        .map(|(&id, iv)| {
            let score = match kind {
                ScoreKind::RelativeIs => relative_is(c, iv, PARALLEL_TOL)?,
                ScoreKind::TaskIs | ScoreKind::SelfIs => task_related_is(c, iv)?,
            };
            Ok(ScoreRecord::new(id, score, kind, variant, test_set))
        })
        .collect()
}

/// `cos(u_i, v_i)` of every pair, in dataset order.
pub fn pair_cosines(enc: &Encoder, theta: &[f64], ds: &PairedDataset) -> Result<Vec<(PairId, f64)>> {
    if ds.is_empty() {
        return Ok(vec![]);
    }
    let refs: Vec<_> = ds.pairs().iter().collect();
    let batch = Batch::from_pairs(&refs, ds.d_t(), ds.d_i());
    let fwd = enc.forward(theta, &batch)?;
    let (ut, vi) = (fwd.unit_text(), fwd.unit_image());
    Ok((0..batch.ids.len()).map(|i| (batch.ids[i], ut.row(i).dot(&vi.row(i)))).collect())
}

/// Self IS of each pair: its own negative log-cosine gradient as `C`.
/// Fails listing every pair whose cosine is not positive.
pub fn self_scores(
    enc: &Encoder,
    theta: &[f64],
    ds: &PairedDataset,
    ids: &[PairId],
    influences: &[InfluenceVectors],
    variant: NegVariant,
) -> Result<Vec<ScoreRecord>> {
    ensure_len(ids.len(), influences.len())?;
    let subset = ds.subset(ids, "scored")?;
    let bad: Vec<PairId> = pair_cosines(enc, theta, &subset)?
        .into_iter()
        .filter(|&(_, c)| !(c > 0.0))
        .map(|(id, _)| id)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonPositiveCosines { ids: bad });
    }
    ids.par_iter()
        .zip(influences)
        .map(|(&id, iv)| {
            let one = ds.subset(&[id], "self")?;
            let c = test_gradient_self(enc, theta, &one)?;
            Ok(ScoreRecord::new(id, task_related_is(&c, iv)?, ScoreKind::SelfIs, variant, "self"))
        })
        .collect()
}

pub fn to_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.pair_id,
            r.kind,
            fmt17::format(r.score),
            r.variant,
            r.sign_convention
        ));
    }
    out
}

/// Parses a score report; `test_set` is not part of the CSV and is supplied.
pub fn from_csv(text: &str, test_set: &str) -> Result<Vec<ScoreRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.splitn(5, ',').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        out.push(ScoreRecord {
            pair_id: fields[0].parse().map_err(|e| bad(format!("pair_id: {e}")))?,
            kind: fields[1].parse()?,
            score: fields[2].parse().map_err(|e| bad(format!("score: {e}")))?,
            variant: fields[3].parse()?,
            sign_convention: fields[4].to_string(),
            test_set: test_set.to_string(),
        });
    }
    Ok(out)
}
