use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error at line {line}: {key}: {msg}")]
    Config { key: String, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: parameter hash mismatch for {part}")]
    HashMismatch { path: PathBuf, part: String },

    #[error("dataset fingerprint mismatch: checkpoint expects {expected}, data is {found}")]
    DatasetFingerprint { expected: String, found: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("frozen parameters changed: {0}")]
    FrozenDrift(String),

    #[error("{0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-parsable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Domain(_) => "domain",
            Error::Config { .. } | Error::Invalid(_) => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::HashMismatch { .. } => "checkpoint-hash",
            Error::DatasetFingerprint { .. } => "dataset-fingerprint",
            Error::NonFiniteLoss { .. } => "non-finite",
            Error::FrozenDrift(_) => "frozen-drift",
            Error::Precondition(_) => "precondition",
        }
    }
}
