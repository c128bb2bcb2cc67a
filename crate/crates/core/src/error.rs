//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are inconsistent (mismatched extents, bad conv
    /// geometry, non-broadcastable shapes, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Value outside the mathematical domain of an operation
    /// (empty reduction, non-positive variance, NaN loss, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The API was driven incorrectly (backward on a non-scalar,
    /// repeated backward without reset, invalid configuration, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Caller-supplied data is invalid (out-of-bounds gather
    /// coordinates, incompatible checkpoint/dataset pair, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A file did not parse: bad magic, version, truncation or a
    /// malformed record.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
