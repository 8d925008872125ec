//! Provenance records attached to evaluations and reports.

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::detection::BackendHello;

pub const TOOL_NAME: &str = "spatialcheck";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Current time, or `SOURCE_DATE_EPOCH` when set, as RFC 3339 UTC.
pub fn timestamp() -> String {
    let now = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0))
        .unwrap_or_else(Utc::now);
    now.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Parameters chosen by calibration and applied to an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRef {
    pub margin: f64,
    pub detection_score: f64,
    pub tau: f64,
    /// Digest of the calibration output the triple was read from.
    pub source_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRecord {
    pub primary: BackendHello,
    pub secondary: Option<BackendHello>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub manifest: u64,
    pub evaluated: u64,
    pub excluded_missing_image: u64,
    pub errors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProvenance {
    pub tool: String,
    pub tool_version: String,
    pub run_id: String,
    pub method: String,
    pub k: usize,
    pub manifest_digest: String,
    /// Directory the manifest's relative image paths resolve against.
    pub image_root: String,
    pub prompts_digest: String,
    pub dataset_digest: Option<String>,
    pub config_digest: String,
    pub config_file: String,
    pub backends: BackendRecord,
    pub calibration: Option<CalibrationRef>,
    pub counterfactual_reduction: String,
    pub counts: EvalCounts,
    pub warnings: Vec<String>,
    pub errors: Vec<SampleError>,
    pub started_at: String,
    pub finished_at: String,
}
