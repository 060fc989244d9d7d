use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QarvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QarvError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("symbol {symbol} outside alphabet [{min}, {max}]")]
    SymbolOutOfRange { symbol: i32, min: i32, max: i32 },

    #[error("truncated or corrupt entropy-coded stream")]
    CorruptStream,

    #[error("malformed container: {0}")]
    Container(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("model mismatch: container was written by a different model configuration")]
    ModelMismatch,

    #[error("lambda {lambda} outside the model's range [{low}, {high}]")]
    LambdaOutOfRange { lambda: f64, low: f64, high: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QarvError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        QarvError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QarvError::Io {
            path: path.into(),
            source,
        }
    }
}
