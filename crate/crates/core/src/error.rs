use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on the arguments does not hold.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A binary file (raster, model container) could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A JSON document parsed but violated its schema. Each entry is
    /// `path: message`.
    #[error("schema violations:\n  {}", .0.join("\n  "))]
    Schema(Vec<String>),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("transport error: {message} (retry after {retry_after_ms} ms)")]
    Transport { message: String, retry_after_ms: u64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
