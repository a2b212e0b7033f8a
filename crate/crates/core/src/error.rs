use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("failed to load tensor `{tensor}`: {reason}")]
    Load { tensor: String, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("simulation diverged at step {step} (|z| = {magnitude:e}); reduce w_s/w_r or the transport rate")]
    Divergence { step: usize, magnitude: f64 },

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn dataset(msg: impl Into<String>) -> Self {
        Self::Dataset(msg.into())
    }

    pub(crate) fn load(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Load {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}
