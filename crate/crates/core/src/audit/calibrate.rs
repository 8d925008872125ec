//! Grid search over (margin, detection threshold, τ) against audit labels.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::risk::{fpr_counts, objective_j_exact, point_at, Audited};
use super::AuditError;
use crate::checker::{CheckError, Checker, CheckerConfig, SampleDetections, SampleIdentity, VerdictKind};
use crate::parallel::ExecMode;
use crate::prompts::PromptRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub margin: Vec<f64>,
    pub detection_score: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self { margin: vec![0.03, 0.05, 0.07, 0.10], detection_score: vec![0.2, 0.3, 0.4], tau: vec![0.3, 0.5, 0.7] }
    }
}

impl Grid {
    pub fn validate(&self) -> Result<(), AuditError> {
        for (name, axis) in [("margin", &self.margin), ("detection_score", &self.detection_score), ("tau", &self.tau)] {
            if axis.is_empty() {
                return Err(AuditError::Invalid(format!("grid axis `{name}` is empty")));
            }
            if axis.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(AuditError::Invalid(format!("grid axis `{name}` has values outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let g: Grid = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        g.validate()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.margin.len() * self.detection_score.len() * self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub margin: f64,
    pub detection_score: f64,
    pub tau: f64,
    pub fpr_pass: f64,
    pub fpr_pass_excl_undecidable: f64,
    pub risk: Option<f64>,
    pub coverage: f64,
    pub j: f64,
    /// Exact objective as `numer/denom`.
    pub j_exact: String,
    /// Risk was undefined (nothing covered and human-decided) and counted as 0.
    pub degenerate: bool,
    pub n_covered: u64,
    pub n_scored: u64,
    /// Index of the first (margin, detection_score) pair in grid order whose
    /// re-evaluated outputs are identical to this one's.
    pub equivalence_class: usize,
    #[serde(skip)]
    j_ratio: Ratio<u64>,
    #[serde(skip)]
    coverage_ratio: Ratio<u64>,
}

impl GridPoint {
    pub fn triple(&self) -> (f64, f64, f64) {
        (self.margin, self.detection_score, self.tau)
    }

    pub fn j_ratio(&self) -> Ratio<u64> {
        self.j_ratio
    }

    /// Selection order: smaller J, then larger coverage, then the smaller
    /// (margin, detection_score, τ) triple.
    pub fn preference(&self, other: &GridPoint) -> Ordering {
        self.j_ratio
            .cmp(&other.j_ratio)
            .then_with(|| other.coverage_ratio.cmp(&self.coverage_ratio))
            .then_with(|| self.margin.total_cmp(&other.margin))
            .then_with(|| self.detection_score.total_cmp(&other.detection_score))
            .then_with(|| self.tau.total_cmp(&other.tau))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub n_audited: usize,
    pub points: Vec<GridPoint>,
    pub selected: GridPoint,
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn score_point(samples: &[Audited], margin: f64, detection_score: f64, tau: f64, class: usize) -> GridPoint {
    let rc = point_at(samples, tau);
    let fpr = fpr_counts(samples, tau);
    let risk = rc.risk_exact();
    let coverage = rc.coverage_exact();
    let j = objective_j_exact(fpr.fpr(), risk, coverage);
    GridPoint {
        margin,
        detection_score,
        tau,
        fpr_pass: ratio_f64(fpr.fpr()),
        fpr_pass_excl_undecidable: ratio_f64(fpr.fpr_excluding_undecidable()),
        risk: risk.map(ratio_f64),
        coverage: ratio_f64(coverage),
        j: ratio_f64(j),
        j_exact: format!("{}/{}", j.numer(), j.denom()),
        degenerate: risk.is_none(),
        n_covered: rc.n_covered,
        n_scored: rc.n_scored,
        equivalence_class: class,
        j_ratio: j,
        coverage_ratio: coverage,
    }
}

/// Evaluate every grid point and select the preferred one.
///
/// `reeval(margin, detection_score)` returns the checker's (verdict,
/// confidence) for each audited sample, aligned with `human`.
pub fn grid_search<F, E>(
    human: &[VerdictKind],
    grid: &Grid,
    reeval: F,
    mode: ExecMode,
) -> Result<CalibrationResult, AuditError>
where
    F: Fn(f64, f64) -> Result<Vec<(VerdictKind, f64)>, E> + Sync + Send,
    E: std::fmt::Display + Send,
{
    grid.validate()?;
    if human.is_empty() {
        return Err(AuditError::Empty);
    }
    let pairs: Vec<(f64, f64)> =
        grid.margin.iter().flat_map(|m| grid.detection_score.iter().map(move |t| (*m, *t))).collect();
    let outputs = mode.map_slice(&pairs, |(m, t)| reeval(*m, *t).map_err(|e| e.to_string()));
    let mut classes: HashMap<Vec<(VerdictKind, u64)>, usize> = HashMap::new();
    let mut points = Vec::with_capacity(grid.len());
    for (i, ((m, t), out)) in pairs.iter().zip(outputs).enumerate() {
        let out = out.map_err(AuditError::Reevaluation)?;
        if out.len() != human.len() {
            return Err(AuditError::Reevaluation(format!(
                "re-evaluation returned {} outputs for {} audited samples",
                out.len(),
                human.len()
            )));
        }
        let key: Vec<(VerdictKind, u64)> = out.iter().map(|(v, c)| (*v, c.to_bits())).collect();
        let class = *classes.entry(key).or_insert(i);
        let samples: Vec<Audited> =
            out.iter().zip(human).map(|((v, c), h)| Audited { checker: *v, confidence: *c, human: *h }).collect();
        for tau in &grid.tau {
            points.push(score_point(&samples, *m, *t, *tau, class));
        }
    }
    let selected = points.iter().min_by(|a, b| a.preference(b)).cloned().expect("grid is non-empty");
    Ok(CalibrationResult { n_audited: human.len(), points, selected })
}

/// One audited sample with everything needed to re-check it offline.
#[derive(Debug, Clone)]
pub struct CachedSample {
    pub identity: SampleIdentity,
    pub prompt: PromptRecord,
    pub detections: SampleDetections,
}

/// Re-run the checker on cached detections with a different margin and
/// detection threshold.
pub fn reevaluate_cached(
    base: &CheckerConfig,
    samples: &[CachedSample],
    margin: f64,
    detection_score: f64,
) -> Result<Vec<(VerdictKind, f64)>, CheckError> {
    let checker = Checker::new(base.with_margin_and_threshold(margin, detection_score))?;
    samples
        .iter()
        .map(|s| checker.check(&s.identity, &s.prompt, &s.detections).map(|o| (o.verdict, o.confidence)))
        .collect()
}
