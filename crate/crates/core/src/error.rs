use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter length mismatch: {kind} expects {expected} values, got {got}")]
    ParamLength {
        kind: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("singular transform (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("operation `{op}` does not support {kind} transforms")]
    UnsupportedKind {
        op: &'static str,
        kind: &'static str,
    },

    #[error("transform kind mismatch: {0} vs {1}")]
    KindMismatch(&'static str, &'static str),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no usable images in {0}")]
    EmptyDataset(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
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
