use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training hit a non-finite loss or weight; `losses` holds every step
    /// loss recorded before the failure.
    #[error("training diverged: {message}")]
    Diverged { message: String, losses: Vec<f64> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
