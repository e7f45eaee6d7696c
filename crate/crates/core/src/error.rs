use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("length {len} is not a power of two")]
    Length { len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("training diverged: non-finite loss at step {step}")]
    NumericalAbort { step: u64 },

    #[error("lineage error: {0}")]
    Lineage(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint payload size mismatch: manifest expects {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },

    #[error("checkpoint manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint tensor {name} has shape {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalAbort { .. } | Error::NonFinite { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
