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

    #[error("missing path: {0}")]
    MissingPath(PathBuf),

    #[error("dataset {path}: {message}")]
    MalformedDataset { path: PathBuf, message: String },

    #[error("dataset {path}: record {record}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        record: usize,
        label: usize,
        classes: usize,
    },

    #[error("no records")]
    NoRecords,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what} = {value}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: &'static str,
        value: f64,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
