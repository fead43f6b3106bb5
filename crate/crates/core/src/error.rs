use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("negative curvature p'Ap = {curvature:e} at CG iteration {iteration}; raise delta or extra_damping")]
    NegativeCurvature { iteration: usize, curvature: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("training did not reach grad_tol after {} iterations (grad norm {:e})", .0.iterations, .0.grad_norm)]
    TrainingNoConvergence(Box<TrainFailure>),

    #[error("non-finite value encountered: {0}")]
    NonFiniteEvaluation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid misalignment ratio {ratio}: {reason}")]
    InvalidRatio { ratio: f64, reason: String },

    #[error("too few pairs ({0}) to form a batch of size >= 2")]
    TooFewPairs(usize),

    #[error("unknown pair id {0}")]
    UnknownId(u64),

    #[error("duplicate pair id {0}")]
    DuplicateId(u64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch{}: expected {expected}, found {found}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    DimensionMismatch {
        expected: usize,
        found: usize,
        line: Option<usize>,
    },

    #[error("embedding row {row} has zero norm")]
    ZeroNormEmbedding { row: usize },

    #[error("parameter vector has length {found}, layout expects {expected}")]
    LayoutMismatch { expected: usize, found: usize },

    #[error("unknown parameter tensor {0:?}")]
    UnknownTensor(String),

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid index set: {0}")]
    InvalidSeg(String),

    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),

    #[error("modified softmax denominator is not positive ({0:e})")]
    NonPositiveDenominator(f64),

    #[error("dimension {dim} exceeds the dense limit {max}")]
    DimensionTooLarge { dim: usize, max: usize },

    #[error("test batch {batch} has fewer than two pairs")]
    SingletonTestBatch { batch: usize },

    #[error("pair {pair_id} has non-positive cosine {cosine}")]
    NonPositiveCosine { pair_id: u64, cosine: f64 },

    #[error("self scores need positive cosine; offending pairs {ids:?}")]
    NonPositiveCosines { ids: Vec<u64> },

    #[error("test gradient is zero")]
    ZeroTestGradient,

    #[error("score records of different kinds cannot be ranked together")]
    MixedKinds,

    #[error("bound denominator is not positive ({0:e})")]
    SingularDenominator(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("pair {requested} is not mispredicted; mispredicted ids: {mispredicted:?}")]
    NotMispredicted { requested: u64, mispredicted: Vec<u64> },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Best iterate and diagnostics carried by a failed training run.
#[derive(Debug, Clone)]
pub struct TrainFailure {
    pub best: Vec<f64>,
    pub grad_norm: f64,
    pub loss: f64,
    pub iterations: usize,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 configuration, 3 training, 4 solver,
    /// 5 scoring preconditions, 6 trace-back target, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::InvalidConfig(_)
            | Error::InvalidRatio { .. }
            | Error::TooFewPairs(_)
            | Error::UnknownId(_)
            | Error::DuplicateId(_)
            | Error::Parse { .. }
            | Error::DimensionMismatch { .. }
            | Error::LayoutMismatch { .. }
            | Error::UnknownTensor(_)
            | Error::InvalidSeg(_)
            | Error::InvalidSegmentation(_)
            | Error::Json(_)
            | Error::Io { .. } => 2,
            Error::TrainingNoConvergence(_) => 3,
            Error::NegativeCurvature { .. } | Error::NoConvergence { .. } | Error::DimensionTooLarge { .. } => 4,
            Error::SingletonTestBatch { .. }
            | Error::NonPositiveCosine { .. }
            | Error::NonPositiveCosines { .. }
            | Error::ZeroTestGradient
            | Error::MixedKinds => 5,
            Error::NotMispredicted { .. } => 6,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
