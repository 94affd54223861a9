use std::fmt;
use std::io;

/// Errors produced by this crate.
#[derive(Debug)]
pub enum Error {
    /// A numeric parameter was NaN or infinite, or produced degenerate bounds.
    InvalidParameter(String),
    /// An architecture or kernel-geometry constraint was violated.
    Config(String),
    /// Map or vector dimensions do not agree.
    Shape(String),
    /// A file did not conform to its binary or text format.
    Format(String),
    /// A runtime input (label, fraction, flag value) was out of range.
    Input(String),
    /// A dataset source contained no usable samples.
    EmptyDataset(String),
    /// The requested dense matrix would exceed the allocation cap.
    OracleTooLarge { cells: usize, cap: usize },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::EmptyDataset(msg) => write!(f, "empty dataset: {msg}"),
            Error::OracleTooLarge { cells, cap } => {
                write!(f, "dense oracle too large: {cells} cells exceeds cap of {cap}")
            }
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
