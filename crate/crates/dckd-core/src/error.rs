//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor or image shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A numeric parameter is outside its documented range.
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: String, reason: String },

    /// Named-array structure (checkpoints, weight files) does not match.
    #[error("structural mismatch at entry `{entry}`: {reason}")]
    Structure { entry: String, reason: String },

    /// A serialized file does not follow the documented schema.
    #[error("schema error in {path}: {reason}")]
    Schema { path: String, reason: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: u64, detail: String },

    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CoreError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        CoreError::InvalidParam {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
