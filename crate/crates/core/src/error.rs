use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse { path: PathBuf, offset: usize, message: String },

    #[error("{path}: invalid json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid phantom geometry: {0}")]
    Geometry(String),

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: u64, what: &'static str },

    #[error("fold leakage: patient {0} appears in both training and validation")]
    FoldLeakage(String),

    #[error("{0}")]
    Infeasible(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), offset, message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
