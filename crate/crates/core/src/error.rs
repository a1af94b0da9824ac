use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cannot sample triplets for attribute '{attribute}': {reason}")]
    Sampling { attribute: String, reason: String },

    #[error(
        "training split lacks images for {}; regenerate the dataset with more images \
         or a different seed so every attribute value occurs in train",
        format_pairs(.0)
    )]
    MissingPairs(Vec<(String, String)>),

    #[error("checkpoint is missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("version mismatch: checkpoint {checkpoint}, index {index}")]
    VersionMismatch { checkpoint: String, index: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(a, v)| format!("{a}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
