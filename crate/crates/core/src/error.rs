use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("layer index {index} out of range ({len} layers)")]
    LayerIndex { index: usize, len: usize },
    #[error("layer {0} is not a dense layer")]
    NotDense(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient rank: {0}")]
    Rank(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unsupported format version {found} in {what} (expected {expected})")]
    Version { what: String, found: u32, expected: u32 },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
