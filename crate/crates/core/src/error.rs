use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("data length mismatch: expected {expected} voxels, found {found}")]
    DataLength { expected: usize, found: usize },

    #[error("unsupported element type: {0}")]
    UnsupportedElementType(String),

    #[error("value {value} at voxel {index} is not representable as {element_type}")]
    Unrepresentable {
        value: f64,
        index: usize,
        element_type: &'static str,
    },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed csv {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("labels contain a single class; both classes are required")]
    SingleClass,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("missing data: {0}")]
    Missing(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Csv {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
