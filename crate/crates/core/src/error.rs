use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("frequency {freq} Hz outside band [{lo}, {hi}] Hz")]
    OutOfBand { freq: f64, lo: f64, hi: f64 },

    #[error("time {t} s outside [0, {duration}] s")]
    OutOfWindow { t: f64, duration: f64 },

    #[error("distance {d} m too small for the far-field approximation (need >= {min} m)")]
    NearField { d: f64, min: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("core-set already holds domain {domain} class {class}")]
    DuplicateInsertion { domain: usize, class: usize },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
