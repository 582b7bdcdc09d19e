//! Workload generation, experiment runner and baselines for the epsolute
//! engine.
//!
//! Datasets are CSV files of `id,key`; record payloads are not stored but
//! derived from the experiment seed and the record ID when loading. Query
//! files are CSV of `kind,a,b`. A run writes one metrics row per query plus a
//! summary row, and wall-clock timings to a separate file so that the metrics
//! file is reproducible byte for byte.

pub mod dataset;
pub mod queries;
pub mod runner;
pub mod scan;

use thiserror::Error;

use epsolute::engine::EngineError;
use epsolute::storage::StorageError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("query {index}: {detail}")]
    Mismatch { index: usize, detail: String },
}
