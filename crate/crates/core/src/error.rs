use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is rank deficient ({0})")]
    RankDeficient(String),

    #[error("matrix is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("signal state {0} is not available")]
    UnknownState(u32),

    #[error("zero reference power")]
    ZeroReference,

    #[error("fit diverged: {0}")]
    Diverged(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite artifact {path}: run phase `{phase}` first")]
    Prerequisite { path: PathBuf, phase: String },

    #[error("artifact {0} was produced by a different configuration")]
    ConfigMismatch(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
