//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("graph already consumed by backward; rebuild the forward pass")]
    GraphConsumed,

    #[error("parameter '{0}' has no gradient")]
    MissingGrad(String),

    #[error("model is frozen: {0}")]
    Frozen(String),

    #[error("model is not frozen: {0}")]
    NotFrozen(String),

    #[error("sequence length {len} exceeds limit {limit}")]
    SequenceTooLong { len: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
