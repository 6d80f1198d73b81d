use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cholesky factorization failed after jitter escalation to {max_jitter:e} (matrix size {size}, smallest pivot {min_pivot:e})")]
    Cholesky {
        size: usize,
        max_jitter: f64,
        min_pivot: f64,
    },

    #[error("covariance is indefinite beyond tolerance: conditional pivot {pivot:e} at position {position}")]
    IndefiniteCovariance { position: usize, pivot: f64 },

    #[error("index {index} is already in the batch")]
    DuplicateIndex { index: usize },

    #[error("action {action} is not allowed in the current state")]
    DisallowedAction { action: usize },

    #[error("state is terminal; no actions are available")]
    TerminalState,

    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },

    #[error("enumeration of {count} states exceeds the cap of {cap}")]
    CapExceeded { count: u128, cap: u128 },

    #[error("sample {0:?} is not in the support")]
    OutOfSupport(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
