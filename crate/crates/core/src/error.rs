use std::path::PathBuf;

use crate::data::Label;

/// Errors raised by the library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("domain `{0}` produced no usable patches")]
    EmptyDomain(String),

    #[error("cannot balance classes: no {missing} patches")]
    Imbalance { missing: Label },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },

    #[error("unknown layer `{name}`; valid layers are: {}", valid.join(", "))]
    UnknownLayer { name: String, valid: Vec<String> },

    #[error("activations of layer `{layer}` have zero variance")]
    DegenerateScale { layer: String },

    #[error("layer `{layer}` has only {count} positive margins (need at least 5)")]
    InsufficientMargins { layer: String, count: usize },

    #[error("numerical failure: {0}")]
    Computation(String),

    #[error("cannot evaluate an empty set: {0}")]
    EmptySet(&'static str),

    #[error("rank correlation is undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Self::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
