use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("zero matched pairs under {root} (unmatched: {})", unmatched.join(", "))]
    NoPairs { root: PathBuf, unmatched: Vec<String> },

    #[error("duplicate pair id `{0}`")]
    DuplicateId(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("weights for backbone `{backbone}` not found at {path}")]
    MissingWeights { backbone: String, path: PathBuf },

    #[error("corrupt weights blob {path}: {reason}")]
    CorruptBlob { path: PathBuf, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "training diverged at step {step}: non-finite {term}; last good checkpoint: {}",
        last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string())
    )]
    Diverged {
        step: u64,
        term: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric: {0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
