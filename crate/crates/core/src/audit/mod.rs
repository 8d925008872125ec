//! Human audit: stratified sampling, label storage, risk–coverage analysis
//! and calibration of the checker's margin, detection threshold and
//! confidence threshold.

pub mod calibrate;
pub mod labels;
pub mod risk;
pub mod sampling;

use thiserror::Error;

pub use calibrate::{grid_search, reevaluate_cached, CachedSample, CalibrationResult, Grid, GridPoint};
pub use labels::{AuditLabel, LabelRevision, LabelStore, SubmitOutcome, LABELS_CSV, LABELS_JSON};
pub use risk::{
    fpr_counts, fpr_pass, objective_j, objective_j_exact, point_at, risk_coverage_curve, Audited, RiskCoveragePoint,
};
pub use sampling::{read_sample_csv, stratified_sample, write_sample_csv, AuditSample, ConfidenceBins, Stratum};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("infeasible audit sample: {0}")]
    Infeasible(String),
    #[error("invalid audit input: {0}")]
    Invalid(String),
    #[error("no audited samples")]
    Empty,
    #[error("annotators disagree on `{0}`")]
    ConflictingLabels(String),
    #[error("prompt `{0}` not in the prompt set")]
    UnknownPrompt(String),
    #[error("re-evaluation failed: {0}")]
    Reevaluation(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
