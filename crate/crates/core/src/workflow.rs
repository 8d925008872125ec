//! Audit analysis and calibration over stored eval directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audit::{
    fpr_counts, grid_search, objective_j_exact, point_at, reevaluate_cached, risk_coverage_curve, AuditError,
    AuditLabel, AuditSample, Audited, CachedSample, CalibrationResult, Grid, LabelStore, RiskCoveragePoint,
};
use crate::checker::{CheckOutcome, CheckerConfig, VerdictKind};
use crate::digest::hash_file;
use crate::mockgen::TruthRecord;
use crate::parallel::ExecMode;
use crate::prompts::PromptSet;
use crate::provenance::{timestamp, CalibrationRef, TOOL_NAME, TOOL_VERSION};
use crate::run::{load_detection_cache, EvalDir, RunError, DETECTIONS_FILE};

pub const AUDIT_METRICS_FILE: &str = "audit_metrics.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

fn integrity(e: impl std::fmt::Display) -> RunError {
    RunError::Integrity(e.to_string())
}

/// Look up every labelled sample in the eval directories, in sample-id order.
pub fn labelled_outcomes<'a>(
    evals: &'a [EvalDir],
    labels: &LabelStore,
) -> Result<Vec<(&'a CheckOutcome, VerdictKind)>, RunError> {
    let verdicts = labels.verdicts().map_err(integrity)?;
    let mut by_id: BTreeMap<&str, &CheckOutcome> = BTreeMap::new();
    for e in evals {
        for o in &e.outcomes {
            if by_id.insert(o.sample_id.as_str(), o).is_some() {
                return Err(RunError::Integrity(format!("sample `{}` appears in two eval directories", o.sample_id)));
            }
        }
    }
    verdicts
        .into_iter()
        .map(|(id, human)| {
            by_id
                .get(id.as_str())
                .map(|o| (*o, human))
                .ok_or_else(|| RunError::Integrity(format!("label for unknown sample `{id}`")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub tau: f64,
    pub coverage: f64,
    pub risk: Option<f64>,
    pub fpr_pass: f64,
    pub fpr_pass_excl_undecidable: f64,
    pub j: f64,
    pub j_exact: String,
    pub n_covered: u64,
    pub n_scored: u64,
    pub n_errors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditAnalysis {
    pub tool: String,
    pub tool_version: String,
    pub n_audited: usize,
    /// Human label × checker verdict counts, keyed `human/checker`.
    pub agreement: BTreeMap<String, u64>,
    pub operating_points: Vec<OperatingPoint>,
    pub curve: Vec<RiskCoveragePoint>,
    /// Present when written by calibration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<SelectedTriple>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedTriple {
    pub margin: f64,
    pub detection_score: f64,
    pub tau: f64,
}

fn ratio_f64(r: num_rational::Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn operating_point(samples: &[Audited], tau: f64) -> OperatingPoint {
    let rc = point_at(samples, tau);
    let fpr = fpr_counts(samples, tau);
    let j = objective_j_exact(fpr.fpr(), rc.risk_exact(), rc.coverage_exact());
    OperatingPoint {
        tau,
        coverage: rc.coverage,
        risk: rc.risk,
        fpr_pass: ratio_f64(fpr.fpr()),
        fpr_pass_excl_undecidable: ratio_f64(fpr.fpr_excluding_undecidable()),
        j: ratio_f64(j),
        j_exact: format!("{}/{}", j.numer(), j.denom()),
        n_covered: rc.n_covered,
        n_scored: rc.n_scored,
        n_errors: rc.n_errors,
    }
}

pub fn analyze_audit(evals: &[EvalDir], labels: &LabelStore, taus: &[f64]) -> Result<AuditAnalysis, RunError> {
    let pairs = labelled_outcomes(evals, labels)?;
    if pairs.is_empty() {
        return Err(integrity(AuditError::Empty));
    }
    let samples: Vec<Audited> =
        pairs.iter().map(|(o, h)| Audited { checker: o.verdict, confidence: o.confidence, human: *h }).collect();
    let mut agreement = BTreeMap::new();
    for s in &samples {
        *agreement.entry(format!("{}/{}", s.human, s.checker)).or_default() += 1;
    }
    Ok(AuditAnalysis {
        tool: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        n_audited: samples.len(),
        agreement,
        operating_points: taus.iter().map(|t| operating_point(&samples, *t)).collect(),
        curve: risk_coverage_curve(&samples),
        grid: None,
        selected: None,
    })
}

/// Stored result of a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub tool: String,
    pub tool_version: String,
    pub created_at: String,
    pub margin: f64,
    pub detection_score: f64,
    pub tau: f64,
    /// Config the audited evals ran under; calibration replaces only the
    /// margin and detection threshold.
    pub base_config_digest: String,
    pub labels_digest: String,
    pub grid: Grid,
    pub result: CalibrationResult,
}

impl CalibrationFile {
    pub fn selected(&self) -> SelectedTriple {
        SelectedTriple { margin: self.margin, detection_score: self.detection_score, tau: self.tau }
    }

    pub fn apply(&self, base: &CheckerConfig) -> CheckerConfig {
        base.with_margin_and_threshold(self.margin, self.detection_score)
    }
}

/// Re-check every audited sample from cached detections for each grid point.
pub fn calibrate(
    evals: &[EvalDir],
    prompts: &PromptSet,
    labels: &LabelStore,
    labels_digest: &str,
    grid: &Grid,
    mode: ExecMode,
) -> Result<CalibrationFile, RunError> {
    let first =
        evals.first().ok_or_else(|| RunError::Integrity("calibration needs at least one eval directory".into()))?;
    if let Some(e) = evals.iter().find(|e| e.config_digest != first.config_digest) {
        return Err(RunError::Integrity(format!(
            "{} was evaluated under a different checker config than {}",
            e.path.display(),
            first.path.display()
        )));
    }
    let mut caches = BTreeMap::new();
    for e in evals {
        caches.extend(load_detection_cache(&e.path.join(DETECTIONS_FILE))?);
    }
    let pairs = labelled_outcomes(evals, labels)?;
    let mut cached = Vec::with_capacity(pairs.len());
    let mut human = Vec::with_capacity(pairs.len());
    for (o, h) in &pairs {
        let prompt =
            prompts.get(&o.prompt_id).ok_or_else(|| integrity(AuditError::UnknownPrompt(o.prompt_id.clone())))?;
        let detections = caches
            .remove(&o.sample_id)
            .ok_or_else(|| RunError::Integrity(format!("no cached detections for `{}`", o.sample_id)))?;
        cached.push(CachedSample { identity: o.identity(), prompt: prompt.clone(), detections });
        human.push(*h);
    }
    let base = &first.config;
    let result = grid_search(&human, grid, |m, t| reevaluate_cached(base, &cached, m, t), mode).map_err(integrity)?;
    let s = &result.selected;
    Ok(CalibrationFile {
        tool: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        created_at: timestamp(),
        margin: s.margin,
        detection_score: s.detection_score,
        tau: s.tau,
        base_config_digest: first.config_digest.clone(),
        labels_digest: labels_digest.to_string(),
        grid: grid.clone(),
        result,
    })
}

/// Load a calibration file and the provenance reference to it.
pub fn load_calibration(path: &Path) -> Result<(CalibrationFile, CalibrationRef), RunError> {
    let io = |source| RunError::Io { path: path.to_path_buf(), source };
    let file: CalibrationFile = serde_json::from_str(&fs::read_to_string(path).map_err(io)?)?;
    let reference = CalibrationRef {
        margin: file.margin,
        detection_score: file.detection_score,
        tau: file.tau,
        source_digest: hash_file(path).map_err(io)?,
    };
    Ok((file, reference))
}

/// Label an audit sample from a ground-truth file, as a stand-in annotator.
pub fn labels_from_truth(
    sample: &[AuditSample],
    truth: &BTreeMap<String, TruthRecord>,
    annotator: &str,
) -> Result<LabelStore, RunError> {
    let mut store = LabelStore::default();
    let at = timestamp();
    for s in sample {
        let t = truth
            .get(&s.sample_id)
            .ok_or_else(|| RunError::Integrity(format!("no ground truth for `{}`", s.sample_id)))?;
        store.submit(AuditLabel {
            sample_id: s.sample_id.clone(),
            verdict: t.verdict,
            annotator: annotator.to_string(),
            timestamp: at.clone(),
        });
    }
    Ok(store)
}
