//! The individual decision rules, each usable on its own.

use serde::{Deserialize, Serialize};

use super::config::CheckerConfig;
use super::outcome::{Reason, Verdict};
use crate::detection::{iou, BoundingBox, Detection, DetectionError, DetectionSet};
use crate::relation::{Axis, Relation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection<'a> {
    Selected(&'a Detection),
    Missing,
    Ambiguous,
}

impl<'a> Selection<'a> {
    pub fn selected(&self) -> Option<&'a Detection> {
        match self {
            Selection::Selected(d) => Some(d),
            _ => None,
        }
    }

    pub fn abstention(&self) -> Option<Reason> {
        match self {
            Selection::Selected(_) => None,
            Selection::Missing => Some(Reason::Missing),
            Selection::Ambiguous => Some(Reason::Ambiguous),
        }
    }
}

pub fn effective_cutoff(set: &DetectionSet, cfg: &CheckerConfig) -> f64 {
    cfg.detection_score.max(set.backend_score_floor)
}

/// Pick the instance of `label` to reason about.
///
/// Survivors pass the effective score cutoff and the minimum area; the top
/// two are compared against `ambiguity_delta`. Equal scores keep response
/// order, so with `ambiguity_delta = 0` the earliest wins.
pub fn select_instance<'a>(set: &'a DetectionSet, label: &str, cfg: &CheckerConfig) -> Selection<'a> {
    let cutoff = effective_cutoff(set, cfg);
    let min_area = cfg.min_area_fraction * set.width * set.height;
    let wanted = label.to_lowercase();
    let mut survivors: Vec<&Detection> = set
        .detections
        .iter()
        .filter(|d| d.label.to_lowercase() == wanted)
        .filter(|d| d.score >= cutoff && d.bbox.area() >= min_area)
        .collect();
    survivors.sort_by(|x, y| y.score.total_cmp(&x.score));
    match survivors.as_slice() {
        [] => Selection::Missing,
        [first, second, ..] if first.score - second.score < cfg.ambiguity_delta => Selection::Ambiguous,
        [first, ..] => Selection::Selected(first),
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("image size {width}x{height} must be positive")]
pub struct DomainError {
    pub width: f64,
    pub height: f64,
}

/// Signed center offset of A relative to B, normalized by the image side
/// along the relation's axis. Image y grows downward.
pub fn relation_delta(
    a: &BoundingBox,
    b: &BoundingBox,
    relation: Relation,
    width: f64,
    height: f64,
) -> Result<f64, DomainError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(DomainError { width, height });
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    Ok(match relation.axis() {
        Axis::Horizontal => (ax - bx) / width,
        Axis::Vertical => (ay - by) / height,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryCall {
    Pass,
    Fail,
    NearBoundary,
}

impl From<GeometryCall> for Verdict {
    fn from(g: GeometryCall) -> Verdict {
        match g {
            GeometryCall::Pass => Verdict::Pass,
            GeometryCall::Fail => Verdict::Fail,
            GeometryCall::NearBoundary => Verdict::Undecidable(Reason::NearBoundary),
        }
    }
}

pub fn decide_geometry(d: f64, relation: Relation, margin: f64) -> GeometryCall {
    if d.abs() <= margin {
        GeometryCall::NearBoundary
    } else if d * relation.expected_sign() > 0.0 {
        GeometryCall::Pass
    } else {
        GeometryCall::Fail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapGate {
    Proceed,
    HighOverlap,
}

/// Heavy overlap makes center ordering unreliable for left/right only.
pub fn overlap_gate(
    a: &BoundingBox,
    b: &BoundingBox,
    relation: Relation,
    max_overlap_iou: f64,
) -> Result<OverlapGate, DetectionError> {
    if relation.is_horizontal() && iou(a, b)? > max_overlap_iou {
        Ok(OverlapGate::HighOverlap)
    } else {
        Ok(OverlapGate::Proceed)
    }
}

/// Fraction of perturbed verdicts equal to `base`; abstentions disagree.
pub fn stability_score(base: Verdict, perturbed: &[Verdict]) -> f64 {
    if perturbed.is_empty() {
        return 1.0;
    }
    let agree = perturbed.iter().filter(|v| **v == base).count();
    agree as f64 / perturbed.len() as f64
}

pub fn is_unstable(stability: f64, cfg: &CheckerConfig) -> bool {
    stability < cfg.consistency_threshold
}

/// Selection plus geometry on one detection set, no overlap or stability
/// gates. Used for perturbed re-runs and the secondary detector.
pub fn decide_set(
    set: &DetectionSet,
    object_a: &str,
    object_b: &str,
    relation: Relation,
    cfg: &CheckerConfig,
) -> Verdict {
    let sel_a = select_instance(set, object_a, cfg);
    if let Some(r) = sel_a.abstention() {
        return Verdict::Undecidable(r);
    }
    let sel_b = select_instance(set, object_b, cfg);
    if let Some(r) = sel_b.abstention() {
        return Verdict::Undecidable(r);
    }
    let (a, b) = (sel_a.selected().unwrap(), sel_b.selected().unwrap());
    match relation_delta(&a.bbox, &b.bbox, relation, set.width, set.height) {
        Ok(d) => decide_geometry(d, relation, cfg.margin).into(),
        // Ingestion guarantees a positive frame.
        Err(_) => Verdict::Undecidable(Reason::Missing),
    }
}
