use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Invariant violation on a specific layer (1-based index).
    #[error("layer {layer} ({name}): {message}")]
    Layer {
        layer: usize,
        name: String,
        message: String,
    },

    #[error("invalid network: {0}")]
    Network(String),

    #[error("invalid rank configuration: {0}")]
    Ranks(String),

    #[error("infeasible budget: {0}")]
    Infeasible(String),

    #[error("no candidate configuration inside the complexity window; {0}")]
    EmptyCandidates(String),

    #[error("curve error on layer {layer}: {message}")]
    Curve { layer: usize, message: String },

    #[error("evaluator failed on candidate {candidate}: {message}")]
    Evaluator { candidate: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),
}

impl EncError {
    pub(crate) fn layer(index: usize, name: &str, message: impl Into<String>) -> Self {
        EncError::Layer {
            layer: index,
            name: name.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EncError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by an unreachable budget, as opposed to bad input.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, EncError::Infeasible(_) | EncError::EmptyCandidates(_))
    }
}

pub type Result<T, E = EncError> = std::result::Result<T, E>;
