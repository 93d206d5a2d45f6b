use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmnError {
    #[error("vector norm below 1e-12, cannot normalize")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("slot index {index} out of range for bank of {len} slots")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("insufficient samples: need more than {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
    #[error("clustering produced no clusters (all points are noise)")]
    NoClusters,
    #[error("selected probability underflowed (sample {sample}, slot {slot})")]
    NonPositiveProbability { sample: usize, slot: usize },
    #[error("no sample in the batch carries a cluster label")]
    EmptyBatch,
    #[error("label {label} invalid for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("no query has a valid cross-camera match")]
    NoValidQueries,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl MmnError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MmnError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for MmnError {
    fn from(e: std::io::Error) -> Self {
        MmnError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for MmnError {
    fn from(e: serde_json::Error) -> Self {
        MmnError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MmnError>;
