use std::path::PathBuf;

use thiserror::Error;

use crate::params::LayerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadTensor {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("missing parameter {0}")]
    MissingParam(LayerId),

    #[error("missing keys: {0:?}")]
    MissingKeys(Vec<String>),

    #[error("backward cache does not match the layer stack: {0}")]
    CacheMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: bad magic number {found:#010x} (expected {expected:#010x})", .path.display())]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{}: truncated file ({missing} bytes short)", .path.display())]
    Truncated { path: PathBuf, missing: usize },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("no hypernetwork for segment {0} -> {1}")]
    MissingHypernet(usize, usize),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. } | Error::InvalidSpec(_) | Error::InvalidArgument(_) | Error::Json { .. }
        )
    }
}
