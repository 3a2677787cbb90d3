use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient pairs: need at least {needed}, got {got}")]
    InsufficientPairs { needed: usize, got: usize },

    #[error("could not draw a matrix with condition number <= {limit} after {attempts} attempts")]
    ConditioningFailure { limit: f64, attempts: usize },

    #[error("batch normalization needs a batch of at least 2 in training mode, got {0}")]
    DegenerateBatch(usize),

    #[error("decoder column {0} has zero norm")]
    ZeroColumn(usize),

    #[error("non-finite value encountered at step {step}")]
    DivergedNaN { step: u64 },

    #[error("every difference vector in the batch is zero")]
    ZeroDifference,

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("zero vector where a nonzero vector is required")]
    ZeroVector,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated in {what} at record {record}")]
    TruncatedFile { what: &'static str, record: u64 },

    #[error("header declares a ground-truth sidecar but {0} is missing")]
    MissingSidecar(PathBuf),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) => ErrorKind::Usage,
            Error::ConditioningFailure { .. }
            | Error::DivergedNaN { .. }
            | Error::ZeroColumn(_)
            | Error::DegenerateBatch(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
