//! Experiment orchestration, inference pipeline, latency benchmark and the
//! HTTP service behind the annotation studio.

pub mod config;
pub mod experiment;
pub mod latency;
pub mod pipeline;
pub mod service;

use std::path::PathBuf;

use waymark_core::dataset::DatasetError;
use waymark_core::detector::DetectorError;
use waymark_core::evaluation::EvalError;
use waymark_core::retrieval::RetrievalError;
use waymark_core::selector::SelectorError;

pub use config::{RafSettings, RunConfig, VariantId, VariantSpec};
pub use experiment::{run_variant, VariantOutcome};
pub use latency::{benchmark_latency, LatencyReport};
pub use pipeline::{Pipeline, Suggestion};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("variant {variant} needs the {role} dataset, but the run config does not name one")]
    MissingRole { variant: VariantId, role: &'static str },
    #[error("variant {variant} needs variant A's checkpoint at {path}; train variant A first or enable train_missing_prerequisites")]
    MissingPrerequisite { variant: VariantId, path: PathBuf },
    #[error("feature bank was built with embedder {bank}, but the selector's embedder is {selector}")]
    BankMismatch { bank: String, selector: String },
    #[error("repetitions must be positive")]
    NoRepetitions,
    #[error("no frames to benchmark")]
    NoFrames,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("{0}: {1}")]
    Json(PathBuf, #[source] serde_json::Error),
}
