use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward error: {0}")]
    Backward(String),

    #[error("degenerate attention: normalizer {denominator:e} is too close to zero")]
    DegenerateAttention { denominator: f64 },

    #[error("batch too small: train-mode batch norm needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("missing feature grid for image '{0}'")]
    MissingFeature(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted at step {step} (group '{group}'): {message}")]
    Training { step: u64, group: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "non-finite",
            Error::Backward(_) => "backward",
            Error::DegenerateAttention { .. } => "degenerate-attention",
            Error::BatchTooSmall(_) => "batch-too-small",
            Error::Lookup(_) => "lookup",
            Error::MissingFeature(_) => "missing-feature",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::Contract(_) => "contract",
            Error::Io { .. } => "io",
        }
    }
}
