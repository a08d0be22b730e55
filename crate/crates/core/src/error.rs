use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("matrix is rank deficient: smallest singular value {smallest:e} vs largest {largest:e}")]
    RankDeficient { smallest: f64, largest: f64 },

    #[error("zero vector: cosine similarity undefined")]
    ZeroVector,

    #[error("merge state holds no tasks")]
    EmptyState,

    #[error("index error: {0}")]
    Index(String),

    #[error("sequence error: expected task index {expected}, got {got}")]
    Sequence { expected: usize, got: usize },

    #[error("training diverged at step {step}: loss {loss:e}")]
    Divergence { step: usize, loss: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("fine-tuned update of B is zero; relative error undefined")]
    ZeroUpdate,

    #[error("report is incomplete: {0}")]
    IncompleteReport(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("report carries no optimal losses")]
    MissingOptimum,

    #[error("order disparity needs at least two task orders, got {0}")]
    NeedTwoOrders(usize),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
