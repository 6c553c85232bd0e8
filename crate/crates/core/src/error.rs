use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HcnError>;

#[derive(Debug, Error)]
pub enum HcnError {
    #[error("{op}: shape mismatch, {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },

    #[error("at least two views are required, got {0}")]
    TooFewViews(usize),

    #[error("views are not row-aligned: view {view} has {found} rows, expected {expected}")]
    MisalignedViews {
        view: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file for {what}: {path}")]
    MissingFile { what: String, path: PathBuf },

    #[error("{what}, row {row}: {message}")]
    Parse {
        what: String,
        row: usize,
        message: String,
    },

    #[error("{what}: declared dims {declared:?} but file holds {found:?}")]
    DimensionMismatch {
        what: String,
        declared: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported checkpoint format version {found:?} (expected {expected})")]
    CheckpointVersion { found: Option<String>, expected: u32 },

    #[error("checkpoint truncated: expected {expected} bytes of parameters, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },

    #[error("checkpoint does not match the model shape: {0}")]
    CheckpointShape(String),

    #[error("unknown preset {name:?}; known presets: {known}")]
    UnknownPreset { name: String, known: String },

    #[error("dataset {0:?} has no ground-truth labels")]
    MissingLabels(String),
}

impl HcnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HcnError::Io {
            path: path.into(),
            source,
        }
    }
}
