use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor {shape} needs {expected} scalars, got {actual}")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },

    #[error("tensor dimensions must be positive, got {0}")]
    EmptyShape(Shape),

    #[error("non-finite value {value} at flat index {index} ({context})")]
    NonFinite { context: String, index: usize, value: f64 },

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },

    #[error("layer `{layer}`: {reason}")]
    LayerShape { layer: String, reason: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid activeness request: {0}")]
    InvalidRequest(String),

    #[error("unsupported norm p = {0}; expected 1 or 2")]
    UnsupportedNorm(u32),

    #[error("unknown architecture template `{name}` (available: {available})")]
    UnknownTemplate { name: String, available: String },

    #[error("model format: {0}")]
    ModelFormat(String),

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("feature file format: {0}")]
    FeatureFormat(String),

    #[error("oracle guard: {0}")]
    OracleGuard(String),

    #[error("invalid training set: {0}")]
    Training(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

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

    /// True for errors raised by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
