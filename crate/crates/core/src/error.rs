use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("pixel ({x}, {y}) is not covered by any tile")]
    IncompleteCoverage { x: usize, y: usize },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed png {}: {reason}", path.display())]
    Png { path: PathBuf, reason: String },

    #[error("malformed json {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("no counterpart for image id `{0}`")]
    UnpairedImage(String),

    #[error("object placement failed: {0}")]
    Placement(String),

    #[error("empty training set")]
    EmptyTrainingSet,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
