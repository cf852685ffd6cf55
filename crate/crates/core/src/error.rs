use std::io;
use std::path::Path;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation requires.
    #[error("dimension error: {0}")]
    Shape(String),

    /// A NaN or infinity appeared, or an input is outside an operation's domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wraps an I/O failure with the path it concerns.
    pub(crate) fn io_at(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
        move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }
}
