//! End-to-end runs behind the command-line tool.
//!
//! Every run is a [`Job`]: a serializable description of inputs and
//! settings. [`run_job`] executes it into an output directory and writes a
//! [`RunManifest`] next to the outputs; [`replay`] re-executes a manifest and
//! reproduces the same bytes.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::NegVariant;
use crate::data::{
    generate_synthetic, load_jsonl, locate, make_segmentation, save_jsonl, BatchedData, PairId, PairedDataset,
    Segmentation, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::fmt17;
use crate::influence::{edit_params, HessianSpec, InfluenceEngine, InfluenceVectors};
use crate::io::{read_to_string, write_atomic};
use crate::model::{Checkpoint, Encoder, EncoderConfig};
use crate::numerics::{spearman, DetRng, RNG_ALGORITHM};
use crate::oracle::{
    compare, Comparison,
    bound_eval, error_report, estimate_constants, newton_step, retrain_removed, train, BoundConstants, ErrorReport,
    Init, ProbeConfig, RetrainMode, TrainConfig, TrainOutcome,
};
use crate::scores::{
    pair_influences, rank_pairs, relative_is, score_with, self_scores, task_related_is, test_gradient_batch,
    test_gradient_self, test_loss_batch, to_csv, Order, ScoreKind, ScoreRecord, PARALLEL_TOL, SIGN_CONVENTION,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synthetic { config: SyntheticConfig },
    File { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<PairedDataset> {
        match self {
            DataSource::Synthetic { config } => generate_synthetic(config),
            DataSource::File { path } => load_jsonl(path),
        }
    }

    fn input(&self) -> Option<&Path> {
        match self {
            DataSource::File { path } => Some(path),
            DataSource::Synthetic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SegSource {
    /// Shuffle ids with `seed`, then cut consecutive batches.
    Shuffled { batch_size: usize, seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelSource {
    Fit { encoder: EncoderConfig },
    Checkpoint { path: PathBuf },
}

/// Training data, batching and model shared by every analysis job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub data: DataSource,
    pub segmentation: SegSource,
    pub model: ModelSource,
    /// Used to fit the model and for every retrain.
    pub train: TrainConfig,
}

/// A held-out set cut into contrastive batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub data: DataSource,
    pub batch_size: usize,
    pub seed: u64,
}

impl TestSet {
    pub fn load(&self) -> Result<(PairedDataset, BatchedData)> {
        let ds = self.data.load()?;
        let seg = segment(&ds, self.batch_size, self.seed)?;
        let batched = BatchedData::new(&ds, &seg)?;
        Ok((ds, batched))
    }
}

fn segment(ds: &PairedDataset, batch_size: usize, seed: u64) -> Result<Segmentation> {
    if ds.is_empty() {
        return Ok(Segmentation::empty());
    }
    make_segmentation(ds, batch_size, seed)
}

/// A loaded [`Setup`] with the model at `θ̂`.
pub struct Prepared {
    pub ds: PairedDataset,
    pub seg: Segmentation,
    pub data: BatchedData,
    pub enc: Encoder,
    pub theta: Vec<f64>,
    pub fit: Option<TrainOutcome>,
}

pub fn prepare(setup: &Setup) -> Result<Prepared> {
    let ds = setup.data.load().map_err(|e| e.at_stage("load data"))?;
    let seg = match &setup.segmentation {
        SegSource::Shuffled { batch_size, seed } => segment(&ds, *batch_size, *seed)?,
        SegSource::File { path } => serde_json::from_str(&read_to_string(path)?)?,
    };
    let data = BatchedData::new(&ds, &seg)?;
    let (enc, theta, fit) = match &setup.model {
        ModelSource::Fit { encoder } => {
            let enc = Encoder::new(encoder.clone())?;
            let out = train(&enc, &data, &setup.train).map_err(|e| e.at_stage("train"))?;
            (enc, out.theta.clone(), Some(out))
        }
        ModelSource::Checkpoint { path } => {
            let ck = Checkpoint::load(path)?;
            let enc = ck.encoder()?;
            (enc, ck.flat, None)
        }
    };
    if enc.config().d_t != ds.d_t() || enc.config().d_i != ds.d_i() {
        return Err(Error::InvalidConfig(format!(
            "model expects ({}, {}) features, dataset has ({}, {})",
            enc.config().d_t,
            enc.config().d_i,
            ds.d_t(),
            ds.d_i()
        )));
    }
    Ok(Prepared {
        ds,
        seg,
        data,
        enc,
        theta,
        fit,
    })
}

/// Starting point of retraining after removal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainStart {
    /// From `θ̂`.
    #[default]
    Warm,
    /// From the initialization used to fit `θ̂`.
    Cold,
}

fn retrain_config(base: &TrainConfig, start: RetrainStart, theta_hat: &[f64]) -> TrainConfig {
    match start {
        RetrainStart::Cold => base.clone(),
        RetrainStart::Warm => TrainConfig {
            init: Init::Warm {
                theta: theta_hat.to_vec(),
            },
            ..base.clone()
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Task,
    #[serde(rename = "self")]
    SelfIs,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Valuable,
    Harmful,
    Random,
}

impl SweepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepMode::Valuable => "valuable",
            SweepMode::Harmful => "harmful",
            SweepMode::Random => "random",
        }
    }
}

/// One reproducible run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "command")]
pub enum Job {
    Gen {
        config: SyntheticConfig,
        file: String,
    },
    Train {
        setup: Setup,
    },
    Influence {
        setup: Setup,
        subset: Vec<PairId>,
        variant: NegVariant,
        hessian: HessianSpec,
        edit: bool,
    },
    Scores {
        setup: Setup,
        mode: ScoreMode,
        /// `None` scores against the training data itself.
        test: Option<TestSet>,
        /// `None` scores every training pair.
        ids: Option<Vec<PairId>>,
        variant: NegVariant,
        hessian: HessianSpec,
        format: Format,
    },
    Detect {
        setup: Setup,
        validation: Option<TestSet>,
        self_mode: bool,
        variant: NegVariant,
        hessian: HessianSpec,
        format: Format,
    },
    Traceback {
        setup: Setup,
        test: TestSet,
        pair: PairId,
        k: usize,
        variant: NegVariant,
        hessian: HessianSpec,
        format: Format,
    },
    Verify {
        setup: Setup,
        removals: Vec<Vec<PairId>>,
        variants: Vec<NegVariant>,
        hessian: HessianSpec,
        options: VerifyOptions,
        test: Option<TestSet>,
    },
    Sweep {
        setup: Setup,
        test: TestSet,
        fractions: Vec<f64>,
        modes: Vec<SweepMode>,
        seeds: Vec<u64>,
        variant: NegVariant,
        hessian: HessianSpec,
        start: RetrainStart,
        format: Format,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Gen { .. } => "gen",
            Job::Train { .. } => "train",
            Job::Influence { .. } => "influence",
            Job::Scores { .. } => "scores",
            Job::Detect { .. } => "detect",
            Job::Traceback { .. } => "traceback",
            Job::Verify { .. } => "verify",
            Job::Sweep { .. } => "sweep",
        }
    }

    fn setup(&self) -> Option<&Setup> {
        match self {
            Job::Gen { .. } => None,
            Job::Train { setup }
            | Job::Influence { setup, .. }
            | Job::Scores { setup, .. }
            | Job::Detect { setup, .. }
            | Job::Traceback { setup, .. }
            | Job::Verify { setup, .. }
            | Job::Sweep { setup, .. } => Some(setup),
        }
    }

    fn tests(&self) -> Vec<&TestSet> {
        match self {
            Job::Scores { test, .. } | Job::Verify { test, .. } => test.iter().collect(),
            Job::Detect { validation, .. } => validation.iter().collect(),
            Job::Traceback { test, .. } | Job::Sweep { test, .. } => vec![test],
            _ => vec![],
        }
    }

    pub fn variant(&self) -> Option<NegVariant> {
        match self {
            Job::Influence { variant, .. }
            | Job::Scores { variant, .. }
            | Job::Detect { variant, .. }
            | Job::Traceback { variant, .. }
            | Job::Sweep { variant, .. } => Some(*variant),
            Job::Verify { variants, .. } => variants.first().copied(),
            _ => None,
        }
    }

    /// Files the job reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let Some(s) = self.setup() {
            out.extend(s.data.input().map(Path::to_path_buf));
            if let SegSource::File { path } = &s.segmentation {
                out.push(path.clone());
            }
            if let ModelSource::Checkpoint { path } = &s.model {
                out.push(path.clone());
            }
        }
        for t in self.tests() {
            out.extend(t.data.input().map(Path::to_path_buf));
        }
        out
    }

    /// Every seed that influences the outputs.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        let synth = |m: &mut BTreeMap<String, u64>, name: &str, src: &DataSource| {
            if let DataSource::Synthetic { config } = src {
                m.insert(format!("{name}.data"), config.seed);
            }
        };
        if let Job::Gen { config, .. } = self {
            m.insert("data".into(), config.seed);
        }
        if let Some(s) = self.setup() {
            synth(&mut m, "train", &s.data);
            if let SegSource::Shuffled { seed, .. } = s.segmentation {
                m.insert("train.segmentation".into(), seed);
            }
            if let ModelSource::Fit { encoder } = &s.model {
                if let crate::model::Anchor::Random { seed, .. } = encoder.anchor {
                    m.insert("anchor".into(), seed);
                }
            }
            if let Init::Jitter { seed, .. } = s.train.init {
                m.insert("init".into(), seed);
            }
        }
        for (i, t) in self.tests().into_iter().enumerate() {
            synth(&mut m, &format!("test{i}"), &t.data);
            m.insert(format!("test{i}.segmentation"), t.seed);
        }
        match self {
            Job::Verify { options: VerifyOptions { bound: Some(p), .. }, .. } => {
                m.insert("probe".into(), p.seed);
            }
            Job::Sweep { seeds, .. } => {
                for (i, s) in seeds.iter().enumerate() {
                    m.insert(format!("sweep[{i}]"), *s);
                }
            }
            _ => {}
        }
        m
    }
}

/// Record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub job: Job,
    pub seeds: BTreeMap<String, u64>,
    pub rng: String,
    pub toolkit_version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
    pub variant: Option<NegVariant>,
    pub sign_convention: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// `"ok"` or the error message.
    pub status: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_to_string(path)?)?)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects output files as a job writes them.
struct Sink<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Sink<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

/// Outcome of a finished job.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub outputs: Vec<PathBuf>,
    /// One-line human summary.
    pub message: String,
}

/// Executes `job` into `out`, writing the manifest even when the job fails.
pub fn run_job(job: &Job, out: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let started = unix_now();
    let mut sink = Sink { dir: out, files: vec![] };
    let result = execute(job, &mut sink);
    let manifest = RunManifest {
        command: job.name().to_string(),
        job: job.clone(),
        seeds: job.seeds(),
        rng: RNG_ALGORITHM.to_string(),
        toolkit_version: TOOLKIT_VERSION.to_string(),
        inputs: job.inputs(),
        outputs: sink.files.clone(),
        variant: job.variant(),
        sign_convention: SIGN_CONVENTION.to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        status: match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => e.to_string(),
        },
    };
    sink.json(MANIFEST_FILE, &manifest)?;
    let message = result?;
    Ok(RunSummary {
        outputs: manifest.outputs.iter().map(|f| out.join(f)).collect(),
        message,
    })
}

/// Re-runs the job recorded in a manifest into `out`.
pub fn replay(manifest: &Path, out: &Path) -> Result<RunSummary> {
    let m = RunManifest::load(manifest)?;
    run_job(&m.job, out)
}

fn execute(job: &Job, sink: &mut Sink) -> Result<String> {
    match job {
        Job::Gen { config, file } => {
            let ds = generate_synthetic(config)?;
            save_jsonl(&ds, &sink.dir.join(file))?;
            sink.files.push(file.clone());
            Ok(format!(
                "n={} d_t={} d_i={} misaligned={}",
                ds.len(),
                ds.d_t(),
                ds.d_i(),
                ds.misaligned_ids().len()
            ))
        }
        Job::Train { setup } => run_train(setup, sink),
        Job::Influence {
            setup,
            subset,
            variant,
            hessian,
            edit,
        } => run_influence(setup, subset, *variant, hessian, *edit, sink),
        Job::Scores {
            setup,
            mode,
            test,
            ids,
            variant,
            hessian,
            format,
        } => run_scores(setup, *mode, test.as_ref(), ids.as_deref(), *variant, hessian, *format, sink),
        Job::Detect {
            setup,
            validation,
            self_mode,
            variant,
            hessian,
            format,
        } => run_detect(setup, validation.as_ref(), *self_mode, *variant, hessian, *format, sink),
        Job::Traceback {
            setup,
            test,
            pair,
            k,
            variant,
            hessian,
            format,
        } => run_traceback(setup, test, *pair, *k, *variant, hessian, *format, sink),
        Job::Verify {
            setup,
            removals,
            variants,
            hessian,
            options,
            test,
        } => run_verify(setup, removals, variants, hessian, options, test.as_ref(), sink),
        Job::Sweep {
            setup,
            test,
            fractions,
            modes,
            seeds,
            variant,
            hessian,
            start,
            format,
        } => run_sweep(setup, test, fractions, modes, seeds, *variant, hessian, *start, *format, sink),
    }
}

#[derive(Debug, Clone, Serialize)]
struct TrainReport {
    converged: bool,
    #[serde(serialize_with = "fmt17::f64")]
    loss: f64,
    #[serde(serialize_with = "fmt17::f64")]
    grad_norm: f64,
    #[serde(serialize_with = "fmt17::f64")]
    grad_tol: f64,
    iterations: usize,
    n_pairs: usize,
    n_batches: usize,
}

fn checkpoint_seed(cfg: &TrainConfig) -> u64 {
    match cfg.init {
        Init::Jitter { seed, .. } => seed,
        _ => 0,
    }
}

fn run_train(setup: &Setup, sink: &mut Sink) -> Result<String> {
    let ModelSource::Fit { encoder } = &setup.model else {
        return Err(Error::InvalidConfig("train needs an encoder configuration, not a checkpoint".into()));
    };
    let ds = setup.data.load()?;
    let seg = match &setup.segmentation {
        SegSource::Shuffled { batch_size, seed } => segment(&ds, *batch_size, *seed)?,
        SegSource::File { path } => serde_json::from_str(&read_to_string(path)?)?,
    };
    let data = BatchedData::new(&ds, &seg)?;
    let enc = Encoder::new(encoder.clone())?;
    sink.json("segmentation.json", &seg)?;
    let seed = checkpoint_seed(&setup.train);
    let report = |theta_loss: (f64, f64, usize), converged| TrainReport {
        converged,
        loss: theta_loss.0,
        grad_norm: theta_loss.1,
        grad_tol: setup.train.grad_tol,
        iterations: theta_loss.2,
        n_pairs: ds.len(),
        n_batches: data.batches.len(),
    };
    match train(&enc, &data, &setup.train) {
        Ok(out) => {
            sink.write("checkpoint.json", Checkpoint::new(encoder.clone(), out.theta.clone(), seed).to_json().as_bytes())?;
            sink.json("train.json", &report((out.loss, out.grad_norm, out.iterations), true))?;
            Ok(format!("loss={} grad_norm={:e} iterations={}", fmt17::format(out.loss), out.grad_norm, out.iterations))
        }
        Err(Error::TrainingNoConvergence(f)) => {
            sink.write("checkpoint.json", Checkpoint::new(encoder.clone(), f.best.clone(), seed).to_json().as_bytes())?;
            sink.json("train.json", &report((f.loss, f.grad_norm, f.iterations), false))?;
            Err(Error::TrainingNoConvergence(f))
        }
        Err(e) => Err(e),
    }
}

fn run_influence(setup: &Setup, subset: &[PairId], variant: NegVariant, hessian: &HessianSpec, edit: bool, sink: &mut Sink) -> Result<String> {
    let p = prepare(setup)?;
    let index = locate(&p.ds, &p.seg, subset)?;
    let engine = InfluenceEngine::new(&p.enc, &p.theta, &p.data, hessian).map_err(|e| e.at_stage("hessian"))?;
    let iv = engine.ecif(&index, variant).map_err(|e| e.at_stage("ecif"))?;
    sink.write("influence.json", iv.to_json().as_bytes())?;
    if edit {
        let edited = edit_params(&p.theta, &iv, -1.0, 0.0)?;
        let ck = Checkpoint::new(p.enc.config().clone(), edited, checkpoint_seed(&setup.train));
        sink.write("edited_checkpoint.json", ck.to_json().as_bytes())?;
    }
    Ok(format!(
        "|pos_if|={:e} |neg_if|={:e} variant={}",
        crate::numerics::norm(&iv.pos_if),
        crate::numerics::norm(&iv.neg_if),
        variant
    ))
}

fn write_records(sink: &mut Sink, stem: &str, records: &[ScoreRecord], format: Format) -> Result<()> {
    let name = format!("{stem}.{}", format.ext());
    match format {
        Format::Csv => sink.write(&name, to_csv(records).as_bytes()),
        Format::Json => sink.json(&name, &records),
    }
}

fn influences_for(p: &Prepared, ids: &[PairId], variant: NegVariant, hessian: &HessianSpec) -> Result<Vec<InfluenceVectors>> {
    let engine = InfluenceEngine::new(&p.enc, &p.theta, &p.data, hessian).map_err(|e| e.at_stage("hessian"))?;
    pair_influences(&engine, &p.ds, &p.seg, ids, variant).map_err(|e| e.at_stage("ecif"))
}

/// Test gradient for task and relative scores: the batch gradient, or the
/// self gradient when the test set is a single pair.
fn test_signal(p: &Prepared, test: Option<&TestSet>, label: &mut String) -> Result<Vec<f64>> {
    match test {
        None => {
            *label = "train".into();
            test_gradient_batch(&p.enc, &p.theta, &p.data)
        }
        Some(t) => {
            let (ds, batched) = t.load()?;
            *label = test_label(t);
            if ds.len() == 1 {
                test_gradient_self(&p.enc, &p.theta, &ds)
            } else {
                test_gradient_batch(&p.enc, &p.theta, &batched)
            }
        }
    }
}

fn test_label(t: &TestSet) -> String {
    match &t.data {
        DataSource::File { path } => path.display().to_string(),
        DataSource::Synthetic { config } => format!("synthetic(seed={},stream={})", config.seed, config.sample_stream),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_scores(
    setup: &Setup,
    mode: ScoreMode,
    test: Option<&TestSet>,
    ids: Option<&[PairId]>,
    variant: NegVariant,
    hessian: &HessianSpec,
    format: Format,
    sink: &mut Sink,
) -> Result<String> {
    let p = prepare(setup)?;
    let ids: Vec<PairId> = ids.map(<[PairId]>::to_vec).unwrap_or_else(|| p.ds.ids());
    let ivs = influences_for(&p, &ids, variant, hessian)?;
    let ranked = match mode {
        ScoreMode::SelfIs => {
            let recs = self_scores(&p.enc, &p.theta, &p.ds, &ids, &ivs, variant)?;
            rank_pairs(&recs, Order::Desc, recs.len())?
        }
        ScoreMode::Task | ScoreMode::Relative => {
            let mut label = String::new();
            let c = test_signal(&p, test, &mut label)?;
            let (kind, order) = if mode == ScoreMode::Task {
                (ScoreKind::TaskIs, Order::Asc)
            } else {
                (ScoreKind::RelativeIs, Order::Desc)
            };
            let recs = score_with(&c, &ids, &ivs, kind, variant, &label)?;
            rank_pairs(&recs, order, recs.len())?
        }
    };
    write_records(sink, "scores", &ranked, format)?;
    Ok(format!("{} pairs scored", ranked.len()))
}

/// Precision of the first `k` ranked ids against a flagged set.
pub fn precision_at(ranked: &[PairId], flagged: &HashSet<PairId>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    ranked.iter().take(k).filter(|id| flagged.contains(id)).count() as f64 / k as f64
}

/// `round(x)` with halves rounded up.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionAt {
    pub k: usize,
    #[serde(serialize_with = "fmt17::f64")]
    pub precision: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub kind: ScoreKind,
    pub precision: Vec<PrecisionAt>,
    /// Why this ranking could not be computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectReport {
    pub primary: ScoreKind,
    pub n: usize,
    pub flagged: Option<usize>,
    /// Present only when the dataset carries ground-truth flags.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<RankingMetrics>>,
}

#[allow(clippy::too_many_arguments)]
fn run_detect(
    setup: &Setup,
    validation: Option<&TestSet>,
    self_mode: bool,
    variant: NegVariant,
    hessian: &HessianSpec,
    format: Format,
    sink: &mut Sink,
) -> Result<String> {
    if !self_mode && validation.is_none() {
        return Err(Error::InvalidConfig("task-IS detection needs a validation set (or use self mode)".into()));
    }
    let p = prepare(setup)?;
    let ids = p.ds.ids();
    let ivs = influences_for(&p, &ids, variant, hessian)?;

    let task = match validation {
        Some(v) => {
            let (_, vdata) = v.load()?;
            let c = test_gradient_batch(&p.enc, &p.theta, &vdata)?;
            let recs = score_with(&c, &ids, &ivs, ScoreKind::TaskIs, variant, &test_label(v))?;
            Some(rank_pairs(&recs, Order::Asc, recs.len())?)
        }
        None => None,
    };
    let has_flags = p.ds.has_flags();
    let selfr = if self_mode || has_flags {
        match self_scores(&p.enc, &p.theta, &p.ds, &ids, &ivs, variant) {
            Ok(recs) => Some(Ok(rank_pairs(&recs, Order::Desc, recs.len())?)),
            Err(e) if self_mode => return Err(e),
            Err(e) => Some(Err(e)),
        }
    } else {
        None
    };

    let (primary_kind, primary) = if self_mode {
        (ScoreKind::SelfIs, selfr.as_ref().and_then(|r| r.as_ref().ok()).expect("self ranking computed"))
    } else {
        (ScoreKind::TaskIs, task.as_ref().expect("validation present"))
    };
    write_records(sink, "detect", primary, format)?;

    let flagged: HashSet<PairId> = p.ds.misaligned_ids().into_iter().collect();
    let metrics = has_flags.then(|| {
        let ks: Vec<usize> = {
            let mut ks = vec![round_half_up(flagged.len() as f64 / 2.0), flagged.len()];
            ks.retain(|&k| k > 0);
            ks.dedup();
            ks
        };
        let metrics_of = |kind: ScoreKind, ranked: &[ScoreRecord]| {
            let order: Vec<PairId> = ranked.iter().map(|r| r.pair_id).collect();
            RankingMetrics {
                kind,
                precision: ks
                    .iter()
                    .map(|&k| PrecisionAt {
                        k,
                        precision: precision_at(&order, &flagged, k),
                    })
                    .collect(),
                error: None,
            }
        };
        let mut out = vec![];
        if let Some(t) = &task {
            out.push(metrics_of(ScoreKind::TaskIs, t));
        }
        match &selfr {
            Some(Ok(s)) => out.push(metrics_of(ScoreKind::SelfIs, s)),
            Some(Err(e)) => out.push(RankingMetrics {
                kind: ScoreKind::SelfIs,
                precision: vec![],
                error: Some(e.to_string()),
            }),
            None => {}
        }
        out
    });
    let summary = metrics
        .as_ref()
        .and_then(|m| m.first())
        .and_then(|m| m.precision.last())
        .map(|pa| format!(" precision@{}={}", pa.k, pa.precision))
        .unwrap_or_default();
    sink.json(
        "detect_metrics.json",
        &DetectReport {
            primary: primary_kind,
            n: p.ds.len(),
            flagged: has_flags.then_some(flagged.len()),
            metrics,
        },
    )?;
    Ok(format!("ranked {} pairs by {}{}", primary.len(), primary_kind, summary))
}

/// Test pairs whose retrieval argmax within their batch is another pair.
pub fn mispredicted(enc: &Encoder, theta: &[f64], test: &BatchedData) -> Result<Vec<PairId>> {
    let mut out = vec![];
    for b in &test.batches {
        let s = enc.forward(theta, b)?.s;
        for i in 0..s.nrows() {
            let mut best = 0;
            for j in 1..s.ncols() {
                if s[(i, j)] > s[(i, best)] {
                    best = j;
                }
            }
            if best != i {
                out.push(b.ids[i]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracebackReport {
    pub pair: PairId,
    pub mispredicted: Vec<PairId>,
    pub k: usize,
    pub top: Vec<PairId>,
}

#[allow(clippy::too_many_arguments)]
fn run_traceback(
    setup: &Setup,
    test: &TestSet,
    pair: PairId,
    k: usize,
    variant: NegVariant,
    hessian: &HessianSpec,
    format: Format,
    sink: &mut Sink,
) -> Result<String> {
    let p = prepare(setup)?;
    let (tds, tdata) = test.load()?;
    tds.get(pair)?;
    let wrong = mispredicted(&p.enc, &p.theta, &tdata)?;
    if !wrong.contains(&pair) {
        return Err(Error::NotMispredicted {
            requested: pair,
            mispredicted: wrong,
        });
    }
    let c = test_gradient_self(&p.enc, &p.theta, &tds.subset(&[pair], "probe")?)?;
    let ids = p.ds.ids();
    let ivs = influences_for(&p, &ids, variant, hessian)?;
    let recs: Vec<ScoreRecord> = ids
        .iter()
        .zip(&ivs)
        .map(|(&id, iv)| Ok(ScoreRecord::new(id, relative_is(&c, iv, PARALLEL_TOL)?, ScoreKind::RelativeIs, variant, format!("pair {pair}"))))
        .collect::<Result<_>>()?;
    let top = rank_pairs(&recs, Order::Desc, k)?;
    write_records(sink, "traceback", &top, format)?;
    let report = TracebackReport {
        pair,
        mispredicted: wrong,
        k,
        top: top.iter().map(|r| r.pair_id).collect(),
    };
    sink.json("traceback_report.json", &report)?;
    Ok(format!("top {} training pairs for test pair {pair}: {:?}", report.top.len(), report.top))
}

/// Newton-step decomposition of one estimate, with the surrogate retrain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decomposition {
    /// False when the surrogate retrain stopped at its iteration cap; the
    /// surrogate comparisons then use its best iterate.
    pub surrogate_converged: bool,
    pub report: ErrorReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: NegVariant,
    /// Edited parameters against exact retraining.
    pub if_vs_exact: Comparison,
    #[serde(serialize_with = "fmt17::opt_f64", skip_serializing_if = "Option::is_none")]
    pub task_is: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<Decomposition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constants: Option<BoundConstants>,
    #[serde(serialize_with = "fmt17::opt_f64", skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    /// Stage failures of the optional parts, such as an indefinite surrogate
    /// Hessian in the Newton step.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalResult {
    pub removed: Vec<PairId>,
    #[serde(serialize_with = "fmt17::vec")]
    pub theta_retrain_exact: Vec<f64>,
    #[serde(serialize_with = "fmt17::opt_f64", skip_serializing_if = "Option::is_none")]
    pub test_loss_change: Option<f64>,
    pub variants: Vec<VariantResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: NegVariant,
    #[serde(serialize_with = "fmt17::f64")]
    pub median_cosine: f64,
    #[serde(serialize_with = "fmt17::opt_f64")]
    pub median_relative_error: Option<f64>,
    /// Rank correlation between task IS and the measured test-loss change.
    #[serde(serialize_with = "fmt17::opt_f64", skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    #[serde(serialize_with = "fmt17::f64")]
    pub delta: f64,
    pub start: RetrainStart,
    #[serde(serialize_with = "fmt17::vec")]
    pub theta_hat: Vec<f64>,
    pub removals: Vec<RemovalResult>,
    pub summary: Vec<VariantSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Settings of a verify run beyond the removal sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub start: RetrainStart,
    /// Run the surrogate retrain and Newton step.
    pub decomposition: bool,
    /// Estimate the bound constants with these probes.
    pub bound: Option<ProbeConfig>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            start: RetrainStart::Warm,
            decomposition: true,
            bound: Some(ProbeConfig::default()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn verify_variant(
    p: &Prepared,
    engine: &InfluenceEngine,
    index: &crate::data::Seg,
    removed: &[PairId],
    exact: &[f64],
    variant: NegVariant,
    hessian: &HessianSpec,
    cfg: &TrainConfig,
    opts: &VerifyOptions,
    c: Option<&[f64]>,
) -> Result<VariantResult> {
    let iv = engine.ecif(index, variant).map_err(|e| e.at_stage("ecif"))?;
    let theta_if = edit_params(&p.theta, &iv, -1.0, 0.0)?;
    let mut failures = vec![];
    let decomposition = if opts.decomposition {
        let surrogate = match retrain_removed(&p.enc, &p.ds, &p.seg, removed, cfg, RetrainMode::Surrogate { variant }) {
            Ok(o) => Ok((o.theta, true)),
            Err(Error::TrainingNoConvergence(f)) => Ok((f.best, false)),
            Err(e) => Err(e.at_stage("surrogate retrain")),
        };
        let newton = newton_step(&p.enc, &p.theta, &p.data, index, hessian, variant).map_err(|e| e.at_stage("newton step"));
        match (surrogate, newton) {
            (Ok((sur, surrogate_converged)), Ok(nt)) => Some(Decomposition {
                surrogate_converged,
                report: error_report(&p.theta, &theta_if, exact, &sur, &nt.theta)?,
            }),
            (s, n) => {
                failures.extend(s.err().map(|e| e.to_string()));
                failures.extend(n.err().map(|e| e.to_string()));
                None
            }
        }
    } else {
        None
    };
    let (constants, bound) = match &opts.bound {
        Some(probe) => {
            let bc = estimate_constants(&p.enc, &p.theta, &p.data, index, variant, hessian.delta, probe, hessian.hvp_step)
                .map_err(|e| e.at_stage("bound constants"))?;
            match bound_eval(&bc) {
                Ok(b) => (Some(bc), Some(b)),
                Err(e) => {
                    failures.push(e.at_stage("bound").to_string());
                    (Some(bc), None)
                }
            }
        }
        None => (None, None),
    };
    Ok(VariantResult {
        variant,
        if_vs_exact: compare(&p.theta, &theta_if, exact)?,
        task_is: c.map(|c| task_related_is(c, &iv)).transpose()?,
        decomposition,
        constants,
        bound,
        failures,
    })
}

fn run_verify(
    setup: &Setup,
    removals: &[Vec<PairId>],
    variants: &[NegVariant],
    hessian: &HessianSpec,
    opts: &VerifyOptions,
    test: Option<&TestSet>,
    sink: &mut Sink,
) -> Result<String> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("verify needs at least one variant".into()));
    }
    let p = prepare(setup)?;
    let engine = InfluenceEngine::new(&p.enc, &p.theta, &p.data, hessian).map_err(|e| e.at_stage("hessian"))?;
    let tdata = test.map(|t| t.load().map(|x| x.1)).transpose()?;
    let (c, base_loss) = match &tdata {
        Some(t) => (Some(test_gradient_batch(&p.enc, &p.theta, t)?), Some(test_loss_batch(&p.enc, &p.theta, t)?)),
        None => (None, None),
    };
    let cfg = retrain_config(&setup.train, opts.start, &p.theta);
    let results: Vec<RemovalResult> = removals
        .par_iter()
        .map(|removed| -> Result<RemovalResult> {
            let index = locate(&p.ds, &p.seg, removed)?;
            let exact = retrain_removed(&p.enc, &p.ds, &p.seg, removed, &cfg, RetrainMode::ExactRemoval)
                .map_err(|e| e.at_stage("exact retrain"))?
                .theta;
            let test_loss_change = match (&tdata, base_loss) {
                (Some(t), Some(b)) => Some(test_loss_batch(&p.enc, &exact, t)? - b),
                _ => None,
            };
            let per_variant = variants
                .iter()
                .map(|&variant| verify_variant(&p, &engine, &index, removed, &exact, variant, hessian, &cfg, opts, c.as_deref()))
                .collect::<Result<Vec<_>>>()?;
            Ok(RemovalResult {
                removed: removed.clone(),
                theta_retrain_exact: exact,
                test_loss_change,
                variants: per_variant,
            })
        })
        .collect::<Result<_>>()?;

    let summary: Vec<VariantSummary> = variants
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let cos: Vec<f64> = results.iter().map(|r| r.variants[vi].if_vs_exact.cosine).collect();
            let rel: Vec<f64> = results.iter().filter_map(|r| r.variants[vi].if_vs_exact.relative_error).collect();
            let spearman = c.as_ref().map(|_| {
                let is: Vec<f64> = results.iter().map(|r| r.variants[vi].task_is.unwrap_or(f64::NAN)).collect();
                let act: Vec<f64> = results.iter().map(|r| r.test_loss_change.unwrap_or(f64::NAN)).collect();
                spearman(&is, &act)
            });
            VariantSummary {
                variant,
                median_cosine: median(&cos),
                median_relative_error: (!rel.is_empty()).then(|| median(&rel)),
                spearman,
            }
        })
        .collect();

    let mut csv = String::from(
        "removal,removed,variant,if_vs_exact,cosine,relative_error,newton_vs_exact,if_vs_newton,if_vs_surrogate,bound,task_is,test_loss_change\n",
    );
    let opt = |x: Option<f64>| x.map(fmt17::format).unwrap_or_default();
    for (i, r) in results.iter().enumerate() {
        let removed: Vec<String> = r.removed.iter().map(u64::to_string).collect();
        for v in &r.variants {
            let d = v.decomposition.as_ref().map(|d| &d.report);
            csv.push_str(&format!(
                "{i},{},{},{},{},{},{},{},{},{},{},{}\n",
                removed.join(" "),
                v.variant,
                fmt17::format(v.if_vs_exact.error),
                fmt17::format(v.if_vs_exact.cosine),
                opt(v.if_vs_exact.relative_error),
                opt(d.map(|d| d.newton_vs_exact.error)),
                opt(d.map(|d| d.if_vs_newton)),
                opt(d.map(|d| d.if_vs_surrogate.error)),
                opt(v.bound),
                opt(v.task_is),
                opt(r.test_loss_change),
            ));
        }
    }
    sink.write("verify.csv", csv.as_bytes())?;
    let report = VerifyReport {
        delta: hessian.delta,
        start: opts.start,
        theta_hat: p.theta.clone(),
        removals: results,
        summary,
    };
    sink.json("verify.json", &report)?;
    let line: Vec<String> = report
        .summary
        .iter()
        .map(|s| format!("{}: median cosine {:.4}", s.variant, s.median_cosine))
        .collect();
    Ok(line.join("; "))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(serialize_with = "fmt17::f64")]
    pub fraction: f64,
    pub mode: SweepMode,
    pub seed: u64,
    #[serde(serialize_with = "fmt17::f64")]
    pub test_loss: f64,
}

/// Ids removed by a sweep cell.
pub fn sweep_selection(task_ranked_desc: &[PairId], all_ids: &[PairId], mode: SweepMode, k: usize, seed: u64) -> Vec<PairId> {
    match mode {
        SweepMode::Valuable => task_ranked_desc.iter().take(k).copied().collect(),
        SweepMode::Harmful => task_ranked_desc.iter().rev().take(k).copied().collect(),
        SweepMode::Random => {
            let mut rng = DetRng::new(seed);
            let mut picked: Vec<PairId> = rand::seq::index::sample(&mut rng, all_ids.len(), k.min(all_ids.len()))
                .into_iter()
                .map(|i| all_ids[i])
                .collect();
            picked.sort_unstable();
            picked
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    setup: &Setup,
    test: &TestSet,
    fractions: &[f64],
    modes: &[SweepMode],
    seeds: &[u64],
    variant: NegVariant,
    hessian: &HessianSpec,
    start: RetrainStart,
    format: Format,
    sink: &mut Sink,
) -> Result<String> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::InvalidConfig(format!("removal fraction must lie in [0, 1), got {f}")));
    }
    let p = prepare(setup)?;
    let (_, tdata) = test.load()?;
    let base = test_loss_batch(&p.enc, &p.theta, &tdata)?;
    let ids = p.ds.ids();
    let needs_scores = modes.iter().any(|m| *m != SweepMode::Random);
    let ranked: Vec<PairId> = if needs_scores {
        let c = test_gradient_batch(&p.enc, &p.theta, &tdata)?;
        let ivs = influences_for(&p, &ids, variant, hessian)?;
        let recs = score_with(&c, &ids, &ivs, ScoreKind::TaskIs, variant, &test_label(test))?;
        rank_pairs(&recs, Order::Desc, recs.len())?.iter().map(|r| r.pair_id).collect()
    } else {
        vec![]
    };
    let cfg = retrain_config(&setup.train, start, &p.theta);
    let mut cells = vec![];
    for &fraction in fractions {
        for &mode in modes {
            for &seed in seeds {
                cells.push((fraction, mode, seed));
            }
        }
    }
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(fraction, mode, seed)| -> Result<SweepRow> {
            let k = round_half_up(fraction * ids.len() as f64);
            let test_loss = if k == 0 {
                base
            } else {
                let removed = sweep_selection(&ranked, &ids, mode, k, seed);
                let theta = retrain_removed(&p.enc, &p.ds, &p.seg, &removed, &cfg, RetrainMode::ExactRemoval)
                    .map_err(|e| e.at_stage("exact retrain"))?
                    .theta;
                test_loss_batch(&p.enc, &theta, &tdata)?
            };
            Ok(SweepRow {
                fraction,
                mode,
                seed,
                test_loss,
            })
        })
        .collect::<Result<_>>()?;
    match format {
        Format::Csv => {
            let mut csv = String::from("fraction,mode,seed,test_loss\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{}\n", r.fraction, r.mode.as_str(), r.seed, fmt17::format(r.test_loss)));
            }
            sink.write("sweep.csv", csv.as_bytes())?;
        }
        Format::Json => sink.json("sweep.json", &rows)?,
    }
    Ok(format!("{} sweep rows, baseline test loss {}", rows.len(), fmt17::format(base)))
}
