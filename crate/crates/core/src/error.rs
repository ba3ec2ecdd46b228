use std::fmt;

/// Errors produced by the toolkit.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A softmax row had every entry masked out.
    DegenerateRow { row: usize },
    /// A caller violated an API precondition.
    Contract(String),
    /// A sequence does not fit in the configured maximum length.
    Capacity { needed: usize, max: usize },
    /// A checkpoint or report file could not be parsed.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { context, expected, got } => {
                write!(f, "{context}: expected shape {expected}, got {got}")
            }
            Self::DegenerateRow { row } => {
                write!(f, "softmax row {row} is fully masked")
            }
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::Capacity { needed, max } => {
                write!(f, "sequence length {needed} exceeds maximum {max}")
            }
            Self::Format(msg) => write!(f, "malformed file: {msg}"),
            Self::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
