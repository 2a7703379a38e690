//! Observation models: ingestion of measurement CSVs into empirical
//! distributions, synthetic presets, and the JSON model file format.

pub mod file;
pub mod ingest;
pub mod synthetic;

use thiserror::Error;

use crate::model::ModelError;

pub use file::{load_model, read_model, save_model, write_model, MODEL_FORMAT};
pub use ingest::{ingest_measurements, ingest_model, IngestOptions, MeasurementRecord, Representation, MEASUREMENT_HEADER};
pub use synthetic::{appendix_uniform, synthetic_model, PoissonLike, SyntheticPreset, TableSpec};

#[derive(Debug, Error)]
pub enum DistsError {
    #[error("measurement source contains no records")]
    EmptySource,
    #[error("unexpected header {found:?}, expected {expected:?}")]
    BadHeader { found: String, expected: &'static str },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("counter out of range at line {line}")]
    CounterOutOfRange { line: u64 },
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
