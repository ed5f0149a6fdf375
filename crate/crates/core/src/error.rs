use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants fall into three families which the CLI maps onto exit codes:
/// data/format problems, contract violations, and plain I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed or missing input data, as opposed to
    /// violated preconditions of an operation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Manifest(_) | Error::MissingArtifact(_) | Error::Io(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
