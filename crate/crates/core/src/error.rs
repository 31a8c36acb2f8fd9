//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty distribution: {0}")]
    EmptyDistribution(String),

    #[error("malformed prompt template or state: {0}")]
    InvalidTemplate(String),

    #[error("embedding table is missing prompts: {0:?}")]
    MissingPrompts(Vec<String>),

    #[error("container: bad magic (expected \"NTC1\")")]
    BadMagic,

    #[error("container: unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("container: truncated or corrupt file")]
    Truncated,

    #[error("container: duplicate tensor name {0:?}")]
    DuplicateTensor(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("tensor {name:?}: expected shape {expected:?}, got {got:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("ground truth mask is not binary: {0}")]
    NonBinaryMask(String),

    #[error("dataset validation failed:\n{}", .0.join("\n"))]
    DatasetValidation(Vec<String>),

    #[error("image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by the environment (filesystem, codecs) rather
    /// than by invalid inputs or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::ImageDecode { .. })
    }
}
