use std::path::PathBuf;

/// Errors surfaced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter or gradient `{0}`")]
    MissingKey(String),

    #[error("training diverged at step {step} in block {block}: loss = {loss}")]
    Diverged { step: usize, block: usize, loss: f64 },

    #[error("worker for block {block} failed: {reason}")]
    Worker { block: usize, reason: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
