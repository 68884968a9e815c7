use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor shape {shape:?} needs {expected} values, got {actual}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch at layer {index} ({layer}): {detail}")]
    LayerShape {
        index: usize,
        layer: String,
        detail: String,
    },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("unknown injection point {id} (model has {count})")]
    InjectionPoint { id: usize, count: usize },

    #[error("invalid noise: {0}")]
    Noise(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("layer {0} has no learnable weights")]
    NotLearnable(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: parse error at byte offset {offset}: {detail}")]
    Parse {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: expected {expected} bytes, found {actual}")]
    FileLength {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error(transparent)]
    Fit(#[from] crate::robustfit::FitError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
