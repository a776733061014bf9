use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("tensor `{0}` not found")]
    MissingTensor(String),

    #[error("tensor `{name}`: payload of {got} bytes does not match declared shape {shape:?} ({expected} bytes)")]
    PayloadMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("tensor `{name}`: unsupported element kind {kind}")]
    UnsupportedKind { name: String, kind: String },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("invalid quantized layer: {0}")]
    InvalidLayer(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("Cholesky breakdown at pivot {pivot} (value {value:e}); matrix is not positive definite")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-positive inverse-Hessian diagonal at index {index} ({value:e})")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("Hessian state: {0}")]
    HessianState(&'static str),

    #[error("non-finite weight at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::NonPositiveDiagonal { .. } | Error::NonFinite { .. }
        )
    }
}
