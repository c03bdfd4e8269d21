use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("candidate {index} out of range 1..={k}")]
    Candidate { index: usize, k: usize },

    #[error("length error: {0}")]
    Length(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("underdetermined fit: need at least {needed} points with distinct N, got {got}")]
    Underdetermined { needed: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("ingestion error for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("stage `{stage}` requires the output of `{missing}` (expected {path})")]
    StageOrder {
        stage: String,
        missing: String,
        path: PathBuf,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
