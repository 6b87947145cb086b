use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ply parse error at {location}: {message}")]
    Ply { location: String, message: String },

    #[error("point cloud is empty")]
    EmptyFrame,

    /// A caller broke an operation's precondition (mismatched scales,
    /// channel counts, unsorted coordinates, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("reference set is empty")]
    EmptyReference,

    #[error("coordinate {coord:?} outside the 2^{depth} cube")]
    OutOfCube { coord: [i32; 3], depth: u32 },

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("weights: {0}")]
    Weights(String),

    #[error("entropy model: {0}")]
    Entropy(String),

    #[error("missing reference latent for a predicted frame")]
    MissingReference,

    #[error("metric: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
