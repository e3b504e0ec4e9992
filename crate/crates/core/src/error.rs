//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An argument is outside its legal range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A caller-facing contract was violated (empty inputs, bad ordering, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation produced NaN or Inf; values never propagate silently.
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    /// Misuse of the gradient tape (mixed tapes, double backward, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// Weight-file parsing or compatibility problems.
    #[error("weights: {0}")]
    Weights(String),

    /// Synthetic scene specification problems.
    #[error("scene spec: {0}")]
    Spec(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
