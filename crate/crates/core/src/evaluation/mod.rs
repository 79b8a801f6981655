//! Metrics, baselines, statistics and report assembly.

use std::path::PathBuf;

pub mod metrics;
pub mod predictions;
pub mod report;
pub mod stats;

pub use metrics::{
    argmax, average_precision, baseline_centermost, baseline_random_expected, detection_metrics, iou, match_detections,
    mean_iou, mstp_accuracy, mstp_correct, recall, DetectionMetrics, FrameDetections, MatchResult, ScoredBox, IOU_THRESHOLD,
    SCORE_THRESHOLD,
};
pub use predictions::{read_jsonl, write_jsonl, DetectionPrediction, SelectionPrediction};
pub use report::{evaluate, render_table, selection_outcomes, EvalReport, SelectionOutcome};
pub use stats::{discordant, mcnemar, multi_seed_summary, SeedSummary};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no ground-truth boxes to evaluate against")]
    NoGroundTruth,
    #[error("no detection matched any ground truth")]
    NoMatches,
    #[error("a frame has zero candidates")]
    ZeroCandidates,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("multi-seed summary needs at least 2 values, got {0}")]
    TooFewSeeds(usize),
    #[error("prediction for unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("frame `{0}`: chosen index out of range")]
    ChosenOutOfRange(String),
    #[error("frame `{0}` has no unique MSTP")]
    NoMstp(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
}
