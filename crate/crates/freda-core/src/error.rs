//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (container, checkpoint, npy).
    #[error("format error: {0}")]
    Format(String),

    /// A tensor or batch had the wrong shape for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An invalid configuration value; `key` names the offending field.
    #[error("invalid config `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    /// Numeric failure (non-finite loss, tolerance violation, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
