use std::path::PathBuf;

/// Errors raised by the engine and its analysis routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: usize },

    #[error("forward cache is stale (cache version {cache}, parameter version {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("running statistics are uninitialized; take at least one training step first")]
    UninitializedRunningStats,

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (max off-diagonal {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("matrix is singular or indefinite (smallest eigenvalue {min_eigenvalue:e})")]
    Singular { min_eigenvalue: f64 },

    #[error("{}: {kind}", path.display())]
    Idx { path: PathBuf, kind: IdxError },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failure modes of the IDX container parser.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdxError {
    #[error("wrong magic 0x{found:08x} (expected 0x{expected:08x})")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} out of range")]
    BadLabel(u8),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
