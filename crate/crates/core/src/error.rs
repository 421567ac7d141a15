use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("load error at line {line}: {message}")]
    Load { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("degenerate input{}: {reason}", class.map(|c| format!(" for class {c}")).unwrap_or_default())]
    Degenerate { class: Option<usize>, reason: String },

    #[error("immutability violation: class {0} is already recorded in the weight bank")]
    Immutable(usize),

    #[error("weight bank incomplete: {0}")]
    BankIncomplete(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn degenerate(reason: impl Into<String>) -> Self {
        Error::Degenerate {
            class: None,
            reason: reason.into(),
        }
    }
}
