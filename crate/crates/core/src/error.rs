//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file {path}: {source}")]
    MissingFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{row}: {detail}")]
    SchemaViolation {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("{path}:{row}: non-finite value in {field}")]
    NonFiniteValue {
        path: PathBuf,
        row: usize,
        field: String,
    },

    #[error("{path}:{row}: label {label} outside [0, {num_classes})")]
    LabelOutOfRange {
        path: PathBuf,
        row: usize,
        label: i64,
        num_classes: usize,
    },

    #[error("domain {id} has {n} samples; at least {min} required")]
    DomainTooSmall { id: String, n: usize, min: usize },

    #[error("writing {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model file {path}: {detail}")]
    ModelFormat { path: PathBuf, detail: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),

    #[error("temperature bounds ({0}, {1}) invalid; need 0 < t_min < t_max")]
    InvalidBounds(f64, f64),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty input")]
    EmptyInput,

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("linear solve failed: {0}")]
    SingularSystem(String),

    #[error("invalid regressor spec: {0}")]
    InvalidSpec(String),

    #[error("need at least {min} domains, got {got}")]
    TooFewDomains { got: usize, min: usize },

    #[error("mixture optimization supports at most {max} source domains, got {got}")]
    TooManyDomains { got: usize, max: usize },

    #[error("bin count must be at least 1")]
    InvalidBinCount,

    #[error("evaluating domain {domain}, sample {row}: {source}")]
    SampleFailure {
        domain: String,
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain {0} carries no oracle confidences")]
    MissingOracle(String),
}
