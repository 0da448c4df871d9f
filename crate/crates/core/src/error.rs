use std::path::PathBuf;

use crate::corpus::InstanceId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}: corpus is empty")]
    EmptyCorpus(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown instance id {0}")]
    UnknownId(InstanceId),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} outside vocabulary of size {size}")]
    LabelOutOfVocabulary { label: usize, size: usize },

    #[error("modality mismatch: model expects {expected}, got {found}")]
    ModalityMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
