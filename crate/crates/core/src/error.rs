use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid quota: requested {requested}, only {available} available")]
    InvalidQuota { requested: usize, available: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("invalid expansion: class {0} already has an output column")]
    InvalidExpansion(u16),

    #[error("label error: {0}")]
    Label(String),

    #[error("schedule error: epoch {epoch} outside [0, {limit})")]
    Schedule { epoch: f64, limit: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
