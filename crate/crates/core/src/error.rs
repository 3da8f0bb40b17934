use std::io;

use thiserror::Error;

/// Errors produced by the engine, its file formats and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    /// A model failed shape validation. `layer` indexes the expanded layer list.
    #[error("layer {layer}: {reason}")]
    Validation { layer: usize, reason: String },

    /// Weights do not match the model they are loaded against.
    #[error("weight/model mismatch: {0}")]
    Load(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("model spec: {0}")]
    Parse(String),

    /// A benchmarked kernel disagreed with the reference before timing.
    #[error("correctness check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn unsupported(msg: impl Into<String>) -> Error {
    Error::UnsupportedShape(msg.into())
}
