use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, unknown names, invalid parameter values.
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad caller-supplied data (empty images, wrong input side, bad annotations).
    #[error("input error: {0}")]
    Input(String),
    /// Malformed file contents (weight containers, PPM headers, annotation lines).
    #[error("format error: {0}")]
    Format(String),
    #[error("training error: {0}")]
    Training(String),
    /// An internal invariant was broken. Always a bug.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 3,
            _ => 2,
        }
    }
}
