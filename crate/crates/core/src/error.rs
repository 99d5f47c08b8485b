use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// Shape and finiteness violations are contract errors: they indicate a bug
/// in the caller or a numerical blow-up, never a recoverable condition.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: non-finite value")]
    NonFinite { op: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("no pseudo-labeled utterance passed the confidence threshold {threshold}; lower the threshold")]
    EmptyKeptSet { threshold: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
