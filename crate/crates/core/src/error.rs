use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("text has no maskable content tokens")]
    EmptyText,

    #[error("attribute space holds {available} combinations but {requested} identities were requested")]
    IdentityCollision { requested: usize, available: usize },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}
