//! Error type shared across the crate.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An id or index fell outside its valid range.
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// A caller broke an operation's precondition.
    Contract(String),
    /// Invalid model or run configuration; the message names the failed invariant.
    Config(String),
    /// Non-finite values showed up where finite ones are required.
    Numeric(String),
    /// Inconsistent or unusable input data.
    Data(String),
    /// A file (corpus, vocabulary, checkpoint) is malformed.
    Format(String),
    /// Underlying I/O failure.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Index { what, index, bound } => {
                write!(f, "{what} {index} out of range (bound {bound})")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
