use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {primitive}: {shapes:?}")]
    ShapeMismatch {
        primitive: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{primitive} produced a non-finite value")]
    NonFinite { primitive: &'static str },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),

    #[error("token id {token} at position {position} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab: usize,
    },

    #[error("parameter sets are misaligned: {0}")]
    MisalignedParams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("informativeness is undefined when the zero-caption accuracy is 0")]
    UndefinedInformativeness,

    #[error("{path}:{line}: {field}: {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("dataset version mismatch: expected {expected:?}, found {found:?}")]
    Version { expected: String, found: String },

    #[error("checkpoint dimension mismatch: checkpoint has [{checkpoint}], model expects [{expected}]")]
    DimensionMismatch { checkpoint: String, expected: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(primitive: &'static str, shapes: &[&[usize]]) -> Self {
        Error::ShapeMismatch {
            primitive,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
