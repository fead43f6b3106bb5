//! Two-encoder embedding model: parameter layout, forward pass, the cosine
//! similarity matrix, and hand-written backpropagation.
//!
//! Trainable parameters `θ` are an offset from a frozen anchor. The encoder
//! evaluates with weights `anchor + θ` while the ridge penalty acts on `θ`
//! alone. A cosine model is invariant to rescaling either encoder, so a ridge
//! on the raw weights would always pull them toward zero and never settle;
//! anchoring restores a well-defined minimizer. With [`Anchor::Zero`] the
//! offset and the weights coincide.

use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::fmt17;
use crate::numerics::{DetRng, Matrix};

/// Rows with norm below this are rejected as degenerate.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    Linear,
    Tanh { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Temperature {
    Fixed { tau: f64 },
    /// `log τ` is a coordinate of `θ`, anchored at `ln init`.
    Trainable { init: f64 },
}

impl Temperature {
    fn initial(&self) -> f64 {
        match *self {
            Temperature::Fixed { tau } => tau,
            Temperature::Trainable { init } => init,
        }
    }
}

/// Frozen base weights the trainable offset is added to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Anchor {
    Zero,
    /// Gaussian weights with variance `gain² / fan_in`, zero biases.
    Random { seed: u64, gain: f64 },
    Explicit {
        #[serde(serialize_with = "fmt17::vec")]
        flat: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_t: usize,
    pub d_i: usize,
    pub k: usize,
    pub architecture: Architecture,
    pub bias: bool,
    pub temperature: Temperature,
    pub anchor: Anchor,
}

/// Default scale of the random anchor. Smaller gains let θ cancel the anchor
/// on individual samples, where normalized embeddings become singular.
pub const DEFAULT_ANCHOR_GAIN: f64 = 16.0;

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_t: 8,
            d_i: 8,
            k: 4,
            architecture: Architecture::Linear,
            bias: false,
            temperature: Temperature::Fixed { tau: 1.0 },
            anchor: Anchor::Random {
                seed: 0,
                gain: DEFAULT_ANCHOR_GAIN,
            },
        }
    }
}

impl EncoderConfig {
    pub fn linear(d_t: usize, d_i: usize, k: usize) -> Self {
        Self {
            d_t,
            d_i,
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("embedding dim k must be >= 2, got {}", self.k)));
        }
        if self.d_t == 0 || self.d_i == 0 {
            return Err(Error::InvalidConfig("input dims must be positive".into()));
        }
        if let Architecture::Tanh { hidden: 0 } = self.architecture {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        let tau = self.temperature.initial();
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {tau}")));
        }
        if let Anchor::Random { gain, .. } = self.anchor {
            if !gain.is_finite() {
                return Err(Error::InvalidConfig("anchor gain must be finite".into()));
            }
        }
        Ok(())
    }
}

/// One named tensor inside the flat parameter vector, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorSpec {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn is_weight(&self) -> bool {
        self.name.starts_with('W')
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &EncoderConfig) -> Self {
        let mut shapes: Vec<(&'static str, usize, usize)> = Vec::new();
        let side = |shapes: &mut Vec<_>, d: usize, text: bool| {
            let (w1, b1, w2, b2, w, b) = if text {
                ("W1_T", "b1_T", "W2_T", "b2_T", "W_T", "b_T")
            } else {
                ("W1_I", "b1_I", "W2_I", "b2_I", "W_I", "b_I")
            };
            match cfg.architecture {
                Architecture::Linear => {
                    shapes.push((w, cfg.k, d));
                    if cfg.bias {
                        shapes.push((b, 1, cfg.k));
                    }
                }
                Architecture::Tanh { hidden } => {
                    shapes.push((w1, hidden, d));
                    if cfg.bias {
                        shapes.push((b1, 1, hidden));
                    }
                    shapes.push((w2, cfg.k, hidden));
                    if cfg.bias {
                        shapes.push((b2, 1, cfg.k));
                    }
                }
            }
        };
        side(&mut shapes, cfg.d_t, true);
        side(&mut shapes, cfg.d_i, false);
        if matches!(cfg.temperature, Temperature::Trainable { .. }) {
            shapes.push(("log_tau", 1, 1));
        }
        let mut offset = 0;
        let tensors = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let t = TensorSpec { name, rows, cols, offset };
                offset += rows * cols;
                t
            })
            .collect();
        Self { tensors, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn spec(&self, name: &str) -> Result<&TensorSpec> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    fn try_spec(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn slice<'a>(&self, flat: &'a [f64], name: &str) -> Result<&'a [f64]> {
        self.check(flat.len())?;
        Ok(&flat[self.spec(name)?.range()])
    }

    pub fn check(&self, found: usize) -> Result<()> {
        if found == self.len {
            Ok(())
        } else {
            Err(Error::LayoutMismatch {
                expected: self.len,
                found,
            })
        }
    }

    /// Splits a flat vector into named matrices.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<(&'static str, Matrix)>> {
        self.check(flat.len())?;
        Ok(self
            .tensors
            .iter()
            .map(|t| (t.name, Matrix::from_row_slice(t.rows, t.cols, &flat[t.range()])))
            .collect())
    }

    /// Inverse of [`ParamLayout::unflatten`].
    pub fn flatten(&self, tensors: &[(&str, Matrix)]) -> Result<Vec<f64>> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::LayoutMismatch {
                expected: self.tensors.len(),
                found: tensors.len(),
            });
        }
        let mut flat = vec![0.0; self.len];
        for (spec, (name, m)) in self.tensors.iter().zip(tensors) {
            if spec.name != *name {
                return Err(Error::UnknownTensor(name.to_string()));
            }
            if m.nrows() != spec.rows || m.ncols() != spec.cols {
                return Err(Error::LayoutMismatch {
                    expected: spec.len(),
                    found: m.len(),
                });
            }
            for r in 0..spec.rows {
                for c in 0..spec.cols {
                    flat[spec.offset + r * spec.cols + c] = m[(r, c)];
                }
            }
        }
        Ok(flat)
    }
}

/// Text and image embeddings of one batch, one row per pair.
#[derive(Debug, Clone)]
pub struct BatchEmbedding {
    pub u: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone)]
struct SideCache {
    hidden: Option<Matrix>,
    norms: Vec<f64>,
    unit: Matrix,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Forward {
    text: SideCache,
    image: SideCache,
    pub tau: f64,
    /// `S[i][j] = cos(u_i, v_j) / τ`.
    pub s: Matrix,
}

impl Forward {
    pub fn unit_text(&self) -> &Matrix {
        &self.text.unit
    }

    pub fn unit_image(&self) -> &Matrix {
        &self.image.unit
    }
}

/// Configured encoder pair with its frozen anchor.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    layout: ParamLayout,
    anchor: Vec<f64>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let mut anchor = match &config.anchor {
            Anchor::Zero => vec![0.0; layout.len()],
            Anchor::Random { seed, gain } => {
                let mut rng = DetRng::new(*seed);
                let mut a = vec![0.0; layout.len()];
                for t in layout.tensors().iter().filter(|t| t.is_weight()) {
                    let scale = gain / (t.cols as f64).sqrt();
                    for x in &mut a[t.range()] {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *x = scale * z;
                    }
                }
                a
            }
            Anchor::Explicit { flat } => {
                layout.check(flat.len())?;
                flat.clone()
            }
        };
        if let (Temperature::Trainable { init }, false) =
            (config.temperature, matches!(config.anchor, Anchor::Explicit { .. }))
        {
            let t = layout.spec("log_tau")?;
            anchor[t.offset] = init.ln();
        }
        Ok(Self {
            config,
            layout,
            anchor,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    /// The zero offset: the anchor itself.
    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.layout.len()]
    }

    /// Weights the encoder actually evaluates with, `anchor + θ`.
    pub fn effective(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.layout.check(theta.len())?;
        Ok(self.anchor.iter().zip(theta).map(|(a, t)| a + t).collect())
    }

    pub fn tau(&self, theta: &[f64]) -> Result<f64> {
        match self.config.temperature {
            Temperature::Fixed { tau } => Ok(tau),
            Temperature::Trainable { .. } => {
                let t = self.layout.spec("log_tau")?;
                self.layout.check(theta.len())?;
                Ok((self.anchor[t.offset] + theta[t.offset]).exp())
            }
        }
    }

    fn mat(&self, eff: &[f64], name: &str) -> Option<Matrix> {
        self.layout
            .try_spec(name)
            .map(|t| Matrix::from_row_slice(t.rows, t.cols, &eff[t.range()]))
    }

    fn side_names(text: bool) -> [&'static str; 6] {
        if text {
            ["W_T", "b_T", "W1_T", "b1_T", "W2_T", "b2_T"]
        } else {
            ["W_I", "b_I", "W1_I", "b1_I", "W2_I", "b2_I"]
        }
    }

    fn encode_side(&self, eff: &[f64], x: &Matrix, text: bool) -> (Option<Matrix>, Matrix) {
        let [w, b, w1, b1, w2, b2] = Self::side_names(text);
        let add_bias = |m: &mut Matrix, bias: Option<Matrix>| {
            if let Some(bias) = bias {
                for mut row in m.row_iter_mut() {
                    row += &bias.row(0);
                }
            }
        };
        match self.config.architecture {
            Architecture::Linear => {
                let w = self.mat(eff, w).expect("linear weight present");
                let mut u = x * w.transpose();
                add_bias(&mut u, self.mat(eff, b));
                (None, u)
            }
            Architecture::Tanh { .. } => {
                let w1 = self.mat(eff, w1).expect("hidden weight present");
                let mut a = x * w1.transpose();
                add_bias(&mut a, self.mat(eff, b1));
                let h = a.map(f64::tanh);
                let w2 = self.mat(eff, w2).expect("output weight present");
                let mut u = &h * w2.transpose();
                add_bias(&mut u, self.mat(eff, b2));
                (Some(h), u)
            }
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Precondition("batch is empty".into()));
        }
        for (found, expected) in [(batch.text.ncols(), self.config.d_t), (batch.image.ncols(), self.config.d_i)] {
            if found != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    found,
                    line: None,
                });
            }
        }
        Ok(())
    }

    /// Raw (unnormalized) embeddings `u = f_T(x^T)`, `v = f_I(x^I)`.
    pub fn embed(&self, theta: &[f64], batch: &Batch) -> Result<BatchEmbedding> {
        self.check_batch(batch)?;
        let eff = self.effective(theta)?;
        let (_, u) = self.encode_side(&eff, &batch.text, true);
        let (_, v) = self.encode_side(&eff, &batch.image, false);
        for m in [&u, &v] {
            if let Some(row) = (0..m.nrows()).find(|&r| m.row(r).norm() < MIN_EMBEDDING_NORM) {
                return Err(Error::ZeroNormEmbedding { row });
            }
        }
        Ok(BatchEmbedding { u, v })
    }

    pub fn forward(&self, theta: &[f64], batch: &Batch) -> Result<Forward> {
        self.check_batch(batch)?;
        let eff = self.effective(theta)?;
        let tau = self.tau(theta)?;
        let side = |text: bool| -> Result<SideCache> {
            let x = if text { &batch.text } else { &batch.image };
            let (hidden, raw) = self.encode_side(&eff, x, text);
            let mut unit = raw;
            let mut norms = Vec::with_capacity(unit.nrows());
            for r in 0..unit.nrows() {
                let n = unit.row(r).norm();
                if !(n >= MIN_EMBEDDING_NORM) {
                    return Err(Error::ZeroNormEmbedding { row: r });
                }
                unit.row_mut(r).unscale_mut(n);
                norms.push(n);
            }
            Ok(SideCache { hidden, norms, unit })
        };
        let text = side(true)?;
        let image = side(false)?;
        let s = (&text.unit * image.unit.transpose()) / tau;
        Ok(Forward { text, image, tau, s })
    }

    pub fn similarity_matrix(&self, theta: &[f64], batch: &Batch) -> Result<Matrix> {
        Ok(self.forward(theta, batch)?.s)
    }

    /// Accumulates `∂ℓ/∂θ` into `grad` from `G = ∂ℓ/∂S`.
    pub fn backward_similarity(&self, theta: &[f64], batch: &Batch, fwd: &Forward, g: &Matrix, grad: &mut [f64]) -> Result<()> {
        let d_unit_text = (g * &fwd.image.unit) / fwd.tau;
        let d_unit_image = (g.transpose() * &fwd.text.unit) / fwd.tau;
        let d_log_tau = -g.component_mul(&fwd.s).sum();
        self.backward(theta, batch, fwd, &d_unit_text, &d_unit_image, d_log_tau, grad)
    }

    /// Accumulates `∂ℓ/∂θ` into `grad` from gradients with respect to the
    /// unit-normalized embeddings and to `log τ`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        theta: &[f64],
        batch: &Batch,
        fwd: &Forward,
        d_unit_text: &Matrix,
        d_unit_image: &Matrix,
        d_log_tau: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.layout.check(grad.len())?;
        let eff = self.effective(theta)?;
        self.backward_side(&eff, &batch.text, &fwd.text, d_unit_text, true, grad);
        self.backward_side(&eff, &batch.image, &fwd.image, d_unit_image, false, grad);
        if let Some(t) = self.layout.try_spec("log_tau") {
            grad[t.offset] += d_log_tau;
        }
        Ok(())
    }

    fn backward_side(&self, eff: &[f64], x: &Matrix, cache: &SideCache, d_unit: &Matrix, text: bool, grad: &mut [f64]) {
        // through row normalization: du = (g - û (û·g)) / ‖u‖
        let mut d_raw = d_unit.clone();
        for r in 0..d_raw.nrows() {
            let proj = cache.unit.row(r).dot(&d_unit.row(r));
            let inv = 1.0 / cache.norms[r];
            for c in 0..d_raw.ncols() {
                d_raw[(r, c)] = (d_unit[(r, c)] - proj * cache.unit[(r, c)]) * inv;
            }
        }
        let [w, b, w1, b1, w2, b2] = Self::side_names(text);
        let mut put = |name: &str, m: &Matrix| {
            if let Some(t) = self.layout.try_spec(name) {
                for r in 0..t.rows {
                    for c in 0..t.cols {
                        grad[t.offset + r * t.cols + c] += m[(r, c)];
                    }
                }
            }
        };
        let col_sums = |m: &Matrix| Matrix::from_fn(1, m.ncols(), |_, c| m.column(c).sum());
        match self.config.architecture {
            Architecture::Linear => {
                put(w, &(d_raw.transpose() * x));
                put(b, &col_sums(&d_raw));
            }
            Architecture::Tanh { .. } => {
                let h = cache.hidden.as_ref().expect("tanh cache has hidden activations");
                put(w2, &(d_raw.transpose() * h));
                put(b2, &col_sums(&d_raw));
                let w2m = self.mat(eff, w2).expect("output weight present");
                let d_h = &d_raw * w2m;
                let d_a = d_h.zip_map(h, |g, hv| g * (1.0 - hv * hv));
                put(w1, &(d_a.transpose() * x));
                put(b1, &col_sums(&d_a));
            }
        }
    }
}

/// `cos(u, v) / τ`.
pub fn similarity(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    let nu = crate::numerics::norm(u);
    let nv = crate::numerics::norm(v);
    if nu < MIN_EMBEDDING_NORM {
        return Err(Error::ZeroNormEmbedding { row: 0 });
    }
    if nv < MIN_EMBEDDING_NORM {
        return Err(Error::ZeroNormEmbedding { row: 1 });
    }
    Ok(crate::numerics::dot(u, v) / (nu * nv) / tau)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    #[serde(serialize_with = "fmt17::vec")]
    pub flat: Vec<f64>,
    pub seed: u64,
    pub version: u32,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, flat: Vec<f64>, seed: u64) -> Self {
        Self {
            config,
            flat,
            seed,
            version: CHECKPOINT_VERSION,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&crate::io::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint version {}", ck.version)));
        }
        ParamLayout::for_config(&ck.config).check(ck.flat.len())?;
        Ok(ck)
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.config.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Pair;
    use crate::numerics::finite_diff_grad;
    use proptest::prelude::*;

    fn batch_of(text: &[&[f64]], image: &[&[f64]]) -> Batch {
        let pairs: Vec<Pair> = text
            .iter()
            .zip(image)
            .enumerate()
            .map(|(i, (t, v))| Pair {
                id: i as u64,
                text: t.to_vec(),
                image: v.to_vec(),
                misaligned: None,
            })
            .collect();
        let refs: Vec<&Pair> = pairs.iter().collect();
        Batch::from_pairs(&refs, text[0].len(), image[0].len())
    }

    fn random_batch(n: usize, d_t: usize, d_i: usize, seed: u64) -> Batch {
        let mut rng = DetRng::new(seed);
        let mut draw = |d: usize| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let text: Vec<Vec<f64>> = (0..n).map(|_| draw(d_t)).collect();
        let image: Vec<Vec<f64>> = (0..n).map(|_| draw(d_i)).collect();
        let t: Vec<&[f64]> = text.iter().map(Vec::as_slice).collect();
        let i: Vec<&[f64]> = image.iter().map(Vec::as_slice).collect();
        batch_of(&t, &i)
    }

    fn zero_anchor(d: usize, k: usize) -> EncoderConfig {
        EncoderConfig {
            anchor: Anchor::Zero,
            ..EncoderConfig::linear(d, d, k)
        }
    }

    #[test]
    fn identity_weights_embed_identity() {
        let enc = Encoder::new(zero_anchor(2, 2)).unwrap();
        let theta = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let b = batch_of(&[&[1.0, 0.0]], &[&[0.0, 3.0]]);
        let e = enc.embed(&theta, &b).unwrap();
        assert_eq!(e.u.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(e.v.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 3.0]);
    }

    #[test]
    fn zero_weights_are_rejected() {
        let enc = Encoder::new(zero_anchor(2, 2)).unwrap();
        let b = batch_of(&[&[1.0, 0.0]], &[&[0.0, 3.0]]);
        assert!(matches!(enc.embed(&enc.zeros(), &b), Err(Error::ZeroNormEmbedding { row: 0 })));
        assert!(matches!(enc.forward(&enc.zeros(), &b), Err(Error::ZeroNormEmbedding { .. })));
    }

    #[test]
    fn embedding_matches_matrix_product() {
        let cfg = EncoderConfig {
            bias: true,
            ..EncoderConfig::linear(5, 3, 4)
        };
        let enc = Encoder::new(cfg).unwrap();
        let mut rng = DetRng::new(11);
        let theta: Vec<f64> = (0..enc.num_params()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b = random_batch(6, 5, 3, 2);
        let e = enc.embed(&theta, &b).unwrap();
        let eff = enc.effective(&theta).unwrap();
        let w = enc.layout().slice(&eff, "W_T").unwrap();
        let bias = enc.layout().slice(&eff, "b_T").unwrap();
        for r in 0..6 {
            for c in 0..4 {
                let mut acc = bias[c];
                for j in 0..5 {
                    acc += w[c * 5 + j] * b.text[(r, j)];
                }
                assert!((acc - e.u[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[0.3, 0.4], &[0.3, 0.4], 1.0).unwrap(), 1.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), 0.0);
        let s = similarity(&[1.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(similarity(&[0.0, 0.0], &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn similarity_matrix_cases() {
        let enc = Encoder::new(EncoderConfig {
            temperature: Temperature::Fixed { tau: 0.5 },
            ..zero_anchor(2, 2)
        })
        .unwrap();
        let theta = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let one = batch_of(&[&[0.6, 0.8]], &[&[0.6, 0.8]]);
        let s = enc.similarity_matrix(&theta, &one).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-15);
        let eye = batch_of(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = enc.similarity_matrix(&theta, &eye).unwrap();
        assert_eq!(s, Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]));
    }

    #[test]
    fn similarity_matrix_matches_entrywise_oracle() {
        let enc = Encoder::new(EncoderConfig::linear(4, 6, 3)).unwrap();
        let b = random_batch(5, 4, 6, 9);
        let s = enc.similarity_matrix(&enc.zeros(), &b).unwrap();
        let e = enc.embed(&enc.zeros(), &b).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let u: Vec<f64> = e.u.row(i).iter().copied().collect();
                let v: Vec<f64> = e.v.row(j).iter().copied().collect();
                assert!((s[(i, j)] - similarity(&u, &v, 1.0).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layout_round_trip_and_lookup() {
        let cfg = EncoderConfig {
            architecture: Architecture::Tanh { hidden: 3 },
            bias: true,
            temperature: Temperature::Trainable { init: 0.7 },
            ..EncoderConfig::linear(4, 5, 2)
        };
        let layout = ParamLayout::for_config(&cfg);
        // independent bookkeeping: 3*4+3 + 2*3+2 + 3*5+3 + 2*3+2 + 1
        assert_eq!(layout.len(), 15 + 8 + 18 + 8 + 1);
        let flat: Vec<f64> = (0..layout.len()).map(|i| i as f64 * 0.5 - 3.0).collect();
        let tensors = layout.unflatten(&flat).unwrap();
        assert_eq!(layout.flatten(&tensors).unwrap(), flat);
        assert_eq!(layout.slice(&flat, "W1_T").unwrap(), &flat[0..12]);
        assert_eq!(layout.slice(&flat, "W1_I").unwrap(), &flat[23..38]);
        assert_eq!(layout.slice(&flat, "log_tau").unwrap(), &flat[49..50]);
        assert!(matches!(layout.unflatten(&flat[1..]), Err(Error::LayoutMismatch { .. })));
        assert!(matches!(layout.slice(&flat, "W_T"), Err(Error::UnknownTensor(_))));

        let lin = ParamLayout::for_config(&EncoderConfig::linear(4, 5, 2));
        let flat: Vec<f64> = (0..lin.len()).map(|i| i as f64).collect();
        let w_t = &lin.unflatten(&flat).unwrap()[0].1;
        assert_eq!(w_t[(1, 2)], 6.0);
    }

    #[test]
    fn trainable_temperature_scales_similarity() {
        let cfg = EncoderConfig {
            temperature: Temperature::Trainable { init: 1.0 },
            ..EncoderConfig::linear(3, 3, 2)
        };
        let enc = Encoder::new(cfg).unwrap();
        let b = random_batch(4, 3, 3, 1);
        let base = enc.similarity_matrix(&enc.zeros(), &b).unwrap();
        let mut shifted = enc.zeros();
        let lt = enc.layout().spec("log_tau").unwrap().offset;
        shifted[lt] = 0.3;
        let s = enc.similarity_matrix(&shifted, &b).unwrap();
        for (a, b) in s.iter().zip(base.iter()) {
            assert!((a - b * (-0.3f64).exp()).abs() < 1e-14);
        }
    }

    fn check_backward(cfg: EncoderConfig, seed: u64) {
        let enc = Encoder::new(cfg).unwrap();
        let mut rng = DetRng::new(seed);
        let theta: Vec<f64> = (0..enc.num_params()).map(|_| 0.3 * rng.normal()).collect();
        let b = random_batch(3, enc.config().d_t, enc.config().d_i, seed + 1);
        let weights = Matrix::from_fn(3, 3, |_, _| StandardNormal.sample(&mut rng));
        let f = |t: &[f64]| -> Result<f64> { Ok(enc.similarity_matrix(t, &b)?.component_mul(&weights).sum()) };
        let fwd = enc.forward(&theta, &b).unwrap();
        let mut g = vec![0.0; enc.num_params()];
        enc.backward_similarity(&theta, &b, &fwd, &weights, &mut g).unwrap();
        let fd = finite_diff_grad(f, &theta, 1e-6).unwrap();
        let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-6 * (1.0 + crate::numerics::norm(&fd)), "err {err}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_backward(
            EncoderConfig {
                bias: true,
                temperature: Temperature::Trainable { init: 0.8 },
                ..EncoderConfig::linear(4, 3, 3)
            },
            1,
        );
        check_backward(
            EncoderConfig {
                architecture: Architecture::Tanh { hidden: 5 },
                bias: true,
                ..EncoderConfig::linear(3, 4, 2)
            },
            2,
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let flat: Vec<f64> = (0..enc.num_params()).map(|i| (i as f64).sin() / 3.0).collect();
        let ck = Checkpoint::new(enc.config().clone(), flat, 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 4),
            v in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(crate::numerics::norm(&u) > 1e-3 && crate::numerics::norm(&v) > 1e-3);
            let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
            let a = similarity(&u, &v, 1.0).unwrap();
            let b = similarity(&cu, &v, 1.0).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn shared_encoder_on_shared_features_is_symmetric(seed in any::<u64>(), n in 1usize..6) {
            let base = Encoder::new(EncoderConfig::linear(3, 3, 2)).unwrap();
            let mut rng = DetRng::new(seed);
            let w: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let theta: Vec<f64> = w.iter().chain(&w).copied().collect();
            let enc = Encoder::new(EncoderConfig { anchor: Anchor::Zero, ..base.config().clone() }).unwrap();
            let feats = random_batch(n, 3, 3, seed ^ 1);
            let same = Batch { ids: feats.ids.clone(), text: feats.text.clone(), image: feats.text.clone() };
            let s = enc.similarity_matrix(&theta, &same).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(s[(i, j)], s[(j, i)]);
                }
            }
        }
    }
}
