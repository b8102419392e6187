//! Scoring of prediction sets against classification and detection ground
//! truth, and report tables built from the scores.

mod manifest;
mod metrics;
mod report;
mod score;

use thiserror::Error;

pub use manifest::{
    classification_truth, detection_truth, load_classification_manifest, load_detection_manifest, BBox,
    ClassificationSample, DetectionSample, Instance, ManifestError, MOVING_OBJECT_CLASSES,
};
pub use metrics::{
    classification_recall, detection_metrics, detection_scores, f1_score, match_detections, DetectionMetrics,
    GroupRecall, MatchPair, Matching, RecallBreakdown, DEFAULT_TAU,
};
pub use report::{
    category_table_csv, category_table_text, compare_reports, cost_performance_table, cost_plot_csv,
    cost_table_csv, cost_table_text, detection_table, detection_table_csv, detection_table_text, round6,
    CostRow, DeltaRow, DeltaTable, DetectionRow, EvalReport, Provenance,
};
pub use score::{score_classification, score_detection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no runs to score")]
    NoRuns,
    #[error("no ground-truth instances; recall is undefined")]
    NoGroundTruth,
    #[error("ground-truth concept `{0}` is not in the taxonomy")]
    UnknownConcept(String),
    #[error("reports use different taxonomy versions (`{a}` vs `{b}`)")]
    VersionMismatch { a: String, b: String },
    #[error("report `{0}` carries no token budget")]
    MissingBudget(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("no run record for sample `{0}`")]
    MissingRecord(String),
    #[error("more than one run record for sample `{0}`")]
    DuplicateRecord(String),
    #[error("{metric} = {value} is out of bounds")]
    OutOfBounds { metric: String, value: f64 },
}
