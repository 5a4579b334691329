//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for tensor, image and training operations.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or channel-count mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input outside an operation's mathematical domain (empty region,
    /// degenerate histogram, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// API contract violated (non-scalar loss, mismatched histogram edges,
    /// wrong channel count, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid scene specification.
    #[error("spec error: {0}")]
    Spec(String),

    /// Malformed file contents; `offset` is the byte position at which
    /// parsing failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Non-finite value encountered during training at the given step.
    #[error("numeric error at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }
    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse { offset, message: message.into() }
    }
}
