use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("png encoding failed for {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("model input mismatch: {0}")]
    ModelInput(String),

    #[error("feature network unavailable: {0}")]
    FeatureNetwork(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("sampling failed at timestep {timestep}: {source}")]
    Sampling {
        timestep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Conflict(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
