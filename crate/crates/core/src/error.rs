//! Crate-wide error type.

use std::fmt;
use std::io;

/// Errors produced by the engine.
///
/// The variants map onto the CLI exit-code contract: `Usage` and `Config`
/// are caller mistakes (exit 1), `Io` and `Format` are file problems
/// (exit 2), `Numeric` is a runtime numerical failure (exit 3).
#[derive(Debug)]
pub enum Error {
    /// Shape or hyperparameter mismatch (wrong channel count, odd extent, ...).
    Config(String),
    /// API misuse: missing forward cache, empty dataset, bad threshold, ...
    Usage(String),
    /// A file exists but does not follow its declared format.
    Format(String),
    /// NaN/Inf encountered where finite values are required.
    Numeric(String),
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
