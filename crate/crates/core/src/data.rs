//! Paired datasets, synthetic generation with injected misalignment, batch
//! segmentation, and the JSONL interchange format.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt17;
use crate::numerics::{ensure_finite, DetRng, Matrix};

pub type PairId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub id: PairId,
    #[serde(serialize_with = "fmt17::vec")]
    pub text: Vec<f64>,
    #[serde(serialize_with = "fmt17::vec")]
    pub image: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misaligned: Option<bool>,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic(SyntheticConfig),
    File(PathBuf),
    Derived(String),
}

/// Ordered list of text/image feature pairs with unique ids.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pairs: Vec<Pair>,
    d_t: usize,
    d_i: usize,
    provenance: Provenance,
    index: HashMap<PairId, usize>,
}

impl PartialEq for PairedDataset {
    fn eq(&self, other: &Self) -> bool {
        self.pairs == other.pairs && self.d_t == other.d_t && self.d_i == other.d_i
    }
}

impl PairedDataset {
    pub fn new(d_t: usize, d_i: usize, pairs: Vec<Pair>, provenance: Provenance) -> Result<Self> {
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if p.text.len() != d_t {
                return Err(Error::DimensionMismatch {
                    expected: d_t,
                    found: p.text.len(),
                    line: None,
                });
            }
            if p.image.len() != d_i {
                return Err(Error::DimensionMismatch {
                    expected: d_i,
                    found: p.image.len(),
                    line: None,
                });
            }
            ensure_finite("text", &p.text)?;
            ensure_finite("image", &p.image)?;
            if index.insert(p.id, i).is_some() {
                return Err(Error::DuplicateId(p.id));
            }
        }
        Ok(Self {
            pairs,
            d_t,
            d_i,
            provenance,
            index,
        })
    }

    pub fn empty(d_t: usize, d_i: usize) -> Self {
        Self::new(d_t, d_i, Vec::new(), Provenance::Derived("empty".into())).expect("empty dataset is valid")
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn d_i(&self) -> usize {
        self.d_i
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn ids(&self) -> Vec<PairId> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    pub fn get(&self, id: PairId) -> Result<&Pair> {
        self.index
            .get(&id)
            .map(|&i| &self.pairs[i])
            .ok_or(Error::UnknownId(id))
    }

    pub fn contains(&self, id: PairId) -> bool {
        self.index.contains_key(&id)
    }

    /// Ids flagged as misaligned, in dataset order.
    pub fn misaligned_ids(&self) -> Vec<PairId> {
        self.pairs
            .iter()
            .filter(|p| p.misaligned == Some(true))
            .map(|p| p.id)
            .collect()
    }

    pub fn has_flags(&self) -> bool {
        self.pairs.iter().any(|p| p.misaligned.is_some())
    }

    /// Sub-dataset with the given ids, in the order given.
    pub fn subset(&self, ids: &[PairId], label: &str) -> Result<Self> {
        let pairs = ids
            .iter()
            .map(|&id| self.get(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.d_t, self.d_i, pairs, Provenance::Derived(label.into()))
    }

    /// Concatenation; ids must stay unique.
    pub fn concat(&self, other: &Self, label: &str) -> Result<Self> {
        if self.d_t != other.d_t || self.d_i != other.d_i {
            return Err(Error::DimensionMismatch {
                expected: self.d_t,
                found: other.d_t,
                line: None,
            });
        }
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        Self::new(self.d_t, self.d_i, pairs, Provenance::Derived(label.into()))
    }
}

/// Desk-scale synthetic generator: shared Gaussian latents pushed through
/// two fixed random linear maps plus isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub latent_dim: usize,
    pub d_t: usize,
    pub d_i: usize,
    pub noise_sigma: f64,
    pub misalign_ratio: f64,
    pub seed: u64,
    /// Draws a different sample from the same maps (e.g. a validation split).
    #[serde(default)]
    pub sample_stream: u64,
    /// First pair id.
    #[serde(default)]
    pub id_offset: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 64,
            latent_dim: 4,
            d_t: 8,
            d_i: 8,
            noise_sigma: 0.3,
            misalign_ratio: 0.0,
            seed: 0,
            sample_stream: 0,
            id_offset: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.d_t == 0 || self.d_i == 0 {
            return Err(Error::InvalidConfig("latent_dim, d_t and d_i must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        misalign_count(self.n, self.misalign_ratio).map(|_| ())
    }

    /// Same maps, fresh sample: the held-out split convention used by the
    /// workflows.
    pub fn validation_split(&self, n: usize) -> Self {
        Self {
            n,
            misalign_ratio: 0.0,
            sample_stream: self.sample_stream + 1,
            id_offset: self.id_offset + 1_000_000,
            ..self.clone()
        }
    }
}

/// `k = round(ρ·n)`, half-up, with the validity rules for injection.
pub fn misalign_count(n: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidRatio {
            ratio,
            reason: "must lie in [0, 1)".into(),
        });
    }
    let k = (ratio * n as f64 + 0.5 + 1e-9).floor() as usize;
    if ratio > 0.0 && k < 2 {
        return Err(Error::InvalidRatio {
            ratio,
            reason: format!("round(ratio * n) = {k}; a derangement needs at least 2 pairs"),
        });
    }
    if k >= n && n > 0 {
        return Err(Error::InvalidRatio {
            ratio,
            reason: format!("round(ratio * n) = {k} must be < n = {n}"),
        });
    }
    Ok(k)
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let r = cfg.latent_dim;
    let map_scale = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("valid normal");
    let mut map_rng = DetRng::with_stream(cfg.seed, 0);
    let text_map = Matrix::from_fn(cfg.d_t, r, |_, _| map_scale.sample(&mut map_rng));
    let image_map = Matrix::from_fn(cfg.d_i, r, |_, _| map_scale.sample(&mut map_rng));

    let mut rng = DetRng::with_stream(cfg.seed, 1 + 2 * cfg.sample_stream);
    let mut pairs = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let z = nalgebra::DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
        let mut text: Vec<f64> = (&text_map * &z).iter().copied().collect();
        let mut image: Vec<f64> = (&image_map * &z).iter().copied().collect();
        for v in text.iter_mut().chain(image.iter_mut()) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += cfg.noise_sigma * e;
        }
        pairs.push(Pair {
            id: cfg.id_offset + i as u64,
            text,
            image,
            misaligned: Some(false),
        });
    }
    let ds = PairedDataset::new(cfg.d_t, cfg.d_i, pairs, Provenance::Synthetic(cfg.clone()))?;
    let mut ds = inject_misalignment(&ds, cfg.misalign_ratio, mix(cfg.seed, 2 + 2 * cfg.sample_stream))?;
    ds.provenance = Provenance::Synthetic(cfg.clone());
    Ok(ds)
}

/// Permutes the image features of `round(ρ·n)` uniformly chosen pairs by a
/// derangement and flags exactly those pairs.
pub fn inject_misalignment(ds: &PairedDataset, ratio: f64, seed: u64) -> Result<PairedDataset> {
    let k = misalign_count(ds.len(), ratio)?;
    if k == 0 {
        return Ok(ds.clone());
    }
    let mut rng = DetRng::new(seed);
    let mut chosen = index::sample(&mut rng, ds.len(), k).into_vec();
    chosen.sort_unstable();
    let perm = derangement(k, &mut rng);

    let mut pairs = ds.pairs.clone();
    for (slot, &src) in chosen.iter().zip(&perm) {
        pairs[*slot].image = ds.pairs[chosen[src]].image.clone();
        pairs[*slot].misaligned = Some(true);
    }
    PairedDataset::new(ds.d_t, ds.d_i, pairs, ds.provenance.clone())
}

fn derangement(k: usize, rng: &mut DetRng) -> Vec<usize> {
    debug_assert!(k >= 2);
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Partition of pair ids into ordered batches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub batches: Vec<Vec<PairId>>,
}

impl Segmentation {
    pub fn new(batches: Vec<Vec<PairId>>) -> Self {
        Self { batches }
    }

    pub fn empty() -> Self {
        Self { batches: Vec::new() }
    }

    /// One batch per consecutive chunk of the given order, no shuffling.
    pub fn sequential(ids: &[PairId], batch_size: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch size must be >= 2, got {batch_size}")));
        }
        if ids.len() < 2 {
            return Err(Error::TooFewPairs(ids.len()));
        }
        let mut batches: Vec<Vec<PairId>> = ids.chunks(batch_size).map(<[PairId]>::to_vec).collect();
        if batches.last().map(Vec::len) == Some(1) {
            let lone = batches.pop().expect("non-empty");
            batches.last_mut().expect("n >= 2 leaves a previous batch").extend(lone);
        }
        Ok(Self { batches })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.batches.iter().map(Vec::len).collect()
    }

    pub fn num_pairs(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Checks that the batches partition exactly the ids of `ds`.
    pub fn validate_for(&self, ds: &PairedDataset) -> Result<()> {
        let mut seen = HashMap::new();
        for (m, batch) in self.batches.iter().enumerate() {
            if batch.is_empty() {
                return Err(Error::InvalidSegmentation(format!("batch {m} is empty")));
            }
            for &id in batch {
                if !ds.contains(id) {
                    return Err(Error::UnknownId(id));
                }
                if seen.insert(id, m).is_some() {
                    return Err(Error::InvalidSegmentation(format!("id {id} appears twice")));
                }
            }
        }
        if seen.len() != ds.len() {
            return Err(Error::InvalidSegmentation(format!(
                "segmentation covers {} of {} pairs",
                seen.len(),
                ds.len()
            )));
        }
        Ok(())
    }

    /// Every batch has at least two pairs.
    pub fn ensure_min_batch(&self) -> Result<()> {
        match self.batches.iter().position(|b| b.len() < 2) {
            None => Ok(()),
            Some(m) => Err(Error::InvalidSegmentation(format!(
                "batch {m} has {} pair(s); contrastive batches need >= 2",
                self.batches[m].len()
            ))),
        }
    }

    /// Removes `ids` in place: batches shrink without reshuffling, and a
    /// batch left with one pair merges into its predecessor (or successor
    /// for the first batch). A lone pair with no neighbor carries zero loss
    /// and is dropped.
    pub fn without(&self, ids: &[PairId]) -> Segmentation {
        let drop: std::collections::HashSet<PairId> = ids.iter().copied().collect();
        let mut batches: Vec<Vec<PairId>> = self
            .batches
            .iter()
            .map(|b| b.iter().copied().filter(|id| !drop.contains(id)).collect::<Vec<_>>())
            .filter(|b| !b.is_empty())
            .collect();
        let mut m = 0;
        while m < batches.len() {
            if batches[m].len() == 1 && batches.len() > 1 {
                let lone = batches.remove(m);
                if m > 0 {
                    batches[m - 1].extend(lone);
                    m -= 1;
                } else {
                    batches[0].splice(0..0, lone);
                }
            } else {
                m += 1;
            }
        }
        if batches.len() == 1 && batches[0].len() == 1 {
            batches.clear();
        }
        Segmentation { batches }
    }
}

/// Shuffles ids by `seed` and cuts consecutive batches of `batch_size`; a
/// trailing singleton joins the previous batch.
pub fn make_segmentation(ds: &PairedDataset, batch_size: usize, seed: u64) -> Result<Segmentation> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!("batch size must be >= 2, got {batch_size}")));
    }
    if ds.len() < 2 {
        return Err(Error::TooFewPairs(ds.len()));
    }
    let mut ids = ds.ids();
    ids.shuffle(&mut DetRng::new(seed));
    Segmentation::sequential(&ids, batch_size)
}

/// Positions of an evaluated subset inside one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegEntry {
    pub batch: usize,
    pub positions: Vec<usize>,
}

/// The index set `{(m, E_m)}` locating a subset inside a segmentation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seg {
    pub entries: Vec<SegEntry>,
}

impl Seg {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.positions.len()).sum()
    }

    pub fn positions_in(&self, batch: usize) -> Option<&[usize]> {
        self.entries
            .iter()
            .find(|e| e.batch == batch)
            .map(|e| e.positions.as_slice())
    }

    /// Ids the index set refers to, batch by batch.
    pub fn ids(&self, seg: &Segmentation) -> Vec<PairId> {
        self.entries
            .iter()
            .flat_map(|e| e.positions.iter().map(move |&p| seg.batches[e.batch][p]))
            .collect()
    }

    pub fn validate(&self, sizes: &[usize]) -> Result<()> {
        let mut last_batch = None;
        for e in &self.entries {
            let size = *sizes
                .get(e.batch)
                .ok_or_else(|| Error::InvalidSeg(format!("batch {} does not exist", e.batch)))?;
            if last_batch.is_some_and(|b| b >= e.batch) {
                return Err(Error::InvalidSeg("entries must be strictly ordered by batch".into()));
            }
            last_batch = Some(e.batch);
            if e.positions.is_empty() {
                return Err(Error::InvalidSeg(format!("batch {} has an empty position list", e.batch)));
            }
            for w in e.positions.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::InvalidSeg("positions must be strictly increasing".into()));
                }
            }
            if let Some(&p) = e.positions.last() {
                if p >= size {
                    return Err(Error::InvalidSeg(format!(
                        "position {p} out of range for batch {} of size {size}",
                        e.batch
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Locates `subset` inside `seg`. Duplicate ids are collapsed.
pub fn locate(ds: &PairedDataset, seg: &Segmentation, subset: &[PairId]) -> Result<Seg> {
    let mut where_: HashMap<PairId, (usize, usize)> = HashMap::with_capacity(seg.num_pairs());
    for (m, batch) in seg.batches.iter().enumerate() {
        for (pos, &id) in batch.iter().enumerate() {
            where_.insert(id, (m, pos));
        }
    }
    let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &id in subset {
        if !ds.contains(id) {
            return Err(Error::UnknownId(id));
        }
        let &(m, pos) = where_.get(&id).ok_or(Error::UnknownId(id))?;
        grouped.entry(m).or_default().push(pos);
    }
    let entries = grouped
        .into_iter()
        .map(|(batch, mut positions)| {
            positions.sort_unstable();
            positions.dedup();
            SegEntry { batch, positions }
        })
        .collect();
    Ok(Seg { entries })
}

/// Feature matrices of one batch, rows in batch order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<PairId>,
    pub text: Matrix,
    pub image: Matrix,
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair], d_t: usize, d_i: usize) -> Self {
        let n = pairs.len();
        Self {
            ids: pairs.iter().map(|p| p.id).collect(),
            text: Matrix::from_fn(n, d_t, |r, c| pairs[r].text[c]),
            image: Matrix::from_fn(n, d_i, |r, c| pairs[r].image[c]),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A dataset materialized batch by batch according to a segmentation.
#[derive(Debug, Clone)]
pub struct BatchedData {
    pub batches: Vec<Batch>,
    pub segmentation: Segmentation,
}

impl BatchedData {
    pub fn new(ds: &PairedDataset, seg: &Segmentation) -> Result<Self> {
        let batches = seg
            .batches
            .iter()
            .map(|ids| {
                let pairs = ids.iter().map(|&id| ds.get(id)).collect::<Result<Vec<_>>>()?;
                Ok(Batch::from_pairs(&pairs, ds.d_t(), ds.d_i()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            batches,
            segmentation: seg.clone(),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.batches.iter().map(Batch::len).collect()
    }

    pub fn num_pairs(&self) -> usize {
        self.batches.iter().map(Batch::len).sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d_t: usize,
    d_i: usize,
    version: u32,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn to_jsonl(ds: &PairedDataset) -> String {
    let header = Header {
        d_t: ds.d_t,
        d_i: ds.d_i,
        version: DATASET_FORMAT_VERSION,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for p in &ds.pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str, source: Provenance) -> Result<PairedDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header row {\"d_t\", \"d_i\", \"version\"}".into(),
    })?;
    let header: Header = serde_json::from_str(htext).map_err(|e| Error::Parse {
        line: hline + 1,
        message: format!("invalid header: {e}"),
    })?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(Error::Parse {
            line: hline + 1,
            message: format!("unsupported version {}", header.version),
        });
    }
    let mut pairs = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let pair: Pair = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        for (len, expected) in [(pair.text.len(), header.d_t), (pair.image.len(), header.d_i)] {
            if len != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    found: len,
                    line: Some(lineno),
                });
            }
        }
        if !seen.insert(pair.id) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("duplicate id {}", pair.id),
            });
        }
        pairs.push(pair);
    }
    PairedDataset::new(header.d_t, header.d_i, pairs, source)
}

pub fn save_jsonl(ds: &PairedDataset, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, to_jsonl(ds).as_bytes())
}

pub fn load_jsonl(path: &Path) -> Result<PairedDataset> {
    let text = crate::io::read_to_string(path)?;
    from_jsonl(&text, Provenance::File(path.to_path_buf()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(n: usize) -> PairedDataset {
        generate_synthetic(&SyntheticConfig {
            n,
            d_t: 3,
            d_i: 2,
            latent_dim: 2,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn misalignment_count_matches_ratio() {
        let ds = generate_synthetic(&SyntheticConfig {
            n: 100,
            misalign_ratio: 0.2,
            seed: 7,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_eq!(ds.misaligned_ids().len(), 20);
    }

    #[test]
    fn zero_ratio_flags_nothing() {
        let ds = tiny(30);
        assert!(ds.misaligned_ids().is_empty());
        assert_eq!(inject_misalignment(&ds, 0.0, 3).unwrap(), ds);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            misalign_ratio: 0.25,
            seed: 99,
            ..SyntheticConfig::default()
        };
        let a = to_jsonl(&generate_synthetic(&cfg).unwrap());
        let b = to_jsonl(&generate_synthetic(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn two_misaligned_pairs_swap() {
        let ds = tiny(10);
        let out = inject_misalignment(&ds, 0.2, 5).unwrap();
        let flagged = out.misaligned_ids();
        assert_eq!(flagged.len(), 2);
        let (a, b) = (flagged[0], flagged[1]);
        assert_eq!(out.get(a).unwrap().image, ds.get(b).unwrap().image);
        assert_eq!(out.get(b).unwrap().image, ds.get(a).unwrap().image);
        for p in out.pairs() {
            if !flagged.contains(&p.id) {
                assert_eq!(p, ds.get(p.id).unwrap());
            }
        }
    }

    #[test]
    fn ratio_needing_single_pair_is_rejected() {
        let ds = tiny(10);
        assert!(matches!(inject_misalignment(&ds, 0.1, 0), Err(Error::InvalidRatio { .. })));
        assert!(matches!(inject_misalignment(&ds, 1.0, 0), Err(Error::InvalidRatio { .. })));
    }

    #[test]
    fn segmentation_sizes() {
        assert_eq!(make_segmentation(&tiny(10), 4, 1).unwrap().sizes(), vec![4, 4, 2]);
        assert_eq!(make_segmentation(&tiny(9), 4, 1).unwrap().sizes(), vec![4, 5]);
        assert_eq!(make_segmentation(&tiny(6), 6, 1).unwrap().sizes(), vec![6]);
        assert!(matches!(make_segmentation(&tiny(1), 4, 1), Err(Error::TooFewPairs(1))));
        assert!(make_segmentation(&tiny(8), 1, 1).is_err());
    }

    #[test]
    fn locate_cases() {
        let ds = tiny(10);
        let seg = make_segmentation(&ds, 4, 3).unwrap();
        assert!(locate(&ds, &seg, &[]).unwrap().is_empty());

        let all = locate(&ds, &seg, &ds.ids()).unwrap();
        for (m, e) in all.entries.iter().enumerate() {
            assert_eq!(e.batch, m);
            assert_eq!(e.positions, (0..seg.batches[m].len()).collect::<Vec<_>>());
        }

        let id = seg.batches[1][2];
        let one = locate(&ds, &seg, &[id]).unwrap();
        assert_eq!(one.entries, vec![SegEntry { batch: 1, positions: vec![2] }]);
        assert!(matches!(locate(&ds, &seg, &[12345]), Err(Error::UnknownId(12345))));
    }

    #[test]
    fn removal_merges_singletons() {
        let seg = Segmentation::new(vec![vec![1, 2, 3], vec![4, 5], vec![6, 7]]);
        assert_eq!(seg.without(&[]).batches, seg.batches);
        assert_eq!(seg.without(&[4]).batches, vec![vec![1, 2, 3, 5], vec![6, 7]]);
        assert_eq!(seg.without(&[1, 2]).batches, vec![vec![3, 4, 5], vec![6, 7]]);
        assert_eq!(seg.without(&[1, 2, 3, 4, 5, 6]).batches, Vec::<Vec<u64>>::new());
        assert_eq!(seg.without(&[2]).batches, vec![vec![1, 3], vec![4, 5], vec![6, 7]]);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let ds = generate_synthetic(&SyntheticConfig {
            n: 12,
            misalign_ratio: 0.25,
            seed: 4,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_jsonl(&ds, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.pairs().iter().zip(ds.pairs()) {
            for (x, y) in a.text.iter().zip(&b.text) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn jsonl_errors() {
        let bad_len = "{\"d_t\":2,\"d_i\":1,\"version\":1}\n{\"id\":0,\"text\":[1.0],\"image\":[2.0]}\n";
        assert!(matches!(
            from_jsonl(bad_len, Provenance::Derived("t".into())),
            Err(Error::DimensionMismatch { line: Some(2), expected: 2, found: 1 })
        ));
        assert!(matches!(
            from_jsonl("", Provenance::Derived("t".into())),
            Err(Error::Parse { line: 1, .. })
        ));
        let header_only = "{\"d_t\":2,\"d_i\":1,\"version\":1}\n";
        let ds = from_jsonl(header_only, Provenance::Derived("t".into())).unwrap();
        assert!(ds.is_empty());
        assert_eq!((ds.d_t(), ds.d_i()), (2, 1));
        let garbage = "{\"d_t\":2,\"d_i\":1,\"version\":1}\nnot json\n";
        assert!(matches!(
            from_jsonl(garbage, Provenance::Derived("t".into())),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn segmentation_partitions_ids(n in 2usize..60, b in 2usize..12, seed in any::<u64>()) {
            let ds = tiny(n);
            let seg = make_segmentation(&ds, b, seed).unwrap();
            seg.validate_for(&ds).unwrap();
            prop_assert!(seg.sizes().iter().all(|&s| s >= 2));
            let mut ids: Vec<u64> = seg.batches.concat();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
        }

        #[test]
        fn injection_preserves_image_multiset(n in 10usize..50, ratio in 0.05f64..0.9, seed in any::<u64>()) {
            let ds = tiny(n);
            let Ok(out) = inject_misalignment(&ds, ratio, seed) else { return Ok(()); };
            let key = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            let mut a: Vec<_> = ds.pairs().iter().map(|p| key(&p.image)).collect();
            let mut b: Vec<_> = out.pairs().iter().map(|p| key(&p.image)).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            for p in out.pairs() {
                let moved = p.image != ds.get(p.id).unwrap().image;
                prop_assert_eq!(moved, p.misaligned == Some(true));
            }
            prop_assert_eq!(out.misaligned_ids().len(), misalign_count(n, ratio).unwrap());
        }

        #[test]
        fn removal_keeps_a_partition(n in 2usize..40, b in 2usize..9, seed in any::<u64>(), mask in any::<u64>()) {
            let ds = tiny(n);
            let seg = make_segmentation(&ds, b, seed).unwrap();
            let removed: Vec<u64> = (0..n as u64).filter(|i| mask >> (i % 64) & 1 == 1).collect();
            let out = seg.without(&removed);
            prop_assert!(out.sizes().iter().all(|&s| s >= 2));
            let kept: std::collections::HashSet<u64> = out.batches.concat().into_iter().collect();
            for id in 0..n as u64 {
                if removed.contains(&id) {
                    prop_assert!(!kept.contains(&id));
                }
            }
            prop_assert!(kept.len() + removed.len() >= n.saturating_sub(1));
        }
    }
}
