use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An API was called in a state where it is not meaningful.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates its contract (e.g. label out of range).
    #[error("data error: {0}")]
    Data(String),

    /// A file does not start with the expected magic/version.
    #[error("format error: {0}")]
    Format(String),

    /// A file ended early or holds inconsistent record lengths.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// A file was written for a different configuration.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// NaN or infinity appeared where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
