use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward called on non-scalar tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{context}: feature row {row} has (near-)zero norm")]
    ZeroNorm { context: &'static str, row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for memory bank of {len} slots")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("class {0} has no members")]
    EmptyClass(usize),

    #[error("non-finite loss (ce={ce}, cmcl={cmcl}) on batch {indices:?}")]
    NonFiniteLoss {
        ce: f64,
        cmcl: f64,
        indices: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
