use thiserror::Error;

/// Errors raised by tensor operations, the encoder, the classifier head and the
/// session protocol.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index error: {0}")]
    Index(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Not enough classes or samples to satisfy the requested layout.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
