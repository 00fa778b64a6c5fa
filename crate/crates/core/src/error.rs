use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Dims;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    Shape {
        op: &'static str,
        lhs: Dims,
        rhs: Dims,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("{}: parse error at byte {offset}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0} mode requires ground-truth labels")]
    MissingTruth(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: Dims, rhs: Dims) -> Self {
        Error::Shape { op, lhs, rhs }
    }
}
