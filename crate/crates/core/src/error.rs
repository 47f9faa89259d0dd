use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CorError>;

#[derive(Debug, Error)]
pub enum CorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown degradation symbol `{0}`")]
    UnknownSymbol(String),

    #[error("label `{0}` cannot be decomposed over the registered bases")]
    Undecomposable(String),

    #[error("basis `{0}` is not registered")]
    UnknownBasis(String),

    #[error("component `{0}` is not among the remaining degradations")]
    ComponentAbsent(String),

    #[error("oracle restoration requires a synthesis record")]
    MissingContext,

    #[error("missing class `{0}` in training samples")]
    MissingClass(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("model/mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CorError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorError::Io {
            path: path.into(),
            source,
        }
    }
}
