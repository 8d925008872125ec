//! Abstaining spatial-relation checker.
//!
//! [`Checker::check`] is a pure function of the prompt, the configuration and
//! the detections gathered for one image; [`Checker::gather`] does the
//! backend I/O. Keeping the two apart lets cached detections be re-checked
//! under other parameters without touching a detector.

pub mod confidence;
pub mod config;
pub mod outcome;
pub mod rules;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{CheckerConfig, ConfigError, Weights};
pub use outcome::{
    Boxes, CheckOutcome, ConfidenceBreakdown, PerturbationVerdict, Reason, SampleIdentity, SecondaryVerdict,
    SelectedBox, Verdict, VerdictKind,
};
pub use rules::{
    decide_geometry, decide_set, overlap_gate, relation_delta, select_instance, stability_score, GeometryCall,
    OverlapGate, Selection,
};

use crate::detection::{request_detections, DetectionError, DetectionSet, DetectorBackend, Perturbation};
use crate::prompts::PromptRecord;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Domain(#[from] rules::DomainError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no detections cached for perturbation `{0}`")]
    MissingPerturbation(String),
}

/// Secondary-detector result for the unperturbed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondaryDetections {
    Ok(DetectionSet),
    Failed { detector_id: String, error: String },
    NotRun,
}

/// Every detection the checker needs for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDetections {
    pub primary: DetectionSet,
    pub perturbed: Vec<DetectionSet>,
    pub secondary: SecondaryDetections,
}

impl SampleDetections {
    pub fn perturbed_for(&self, p: Perturbation) -> Option<&DetectionSet> {
        self.perturbed.iter().find(|s| s.perturbation == Some(p))
    }
}

#[derive(Debug, Clone)]
pub struct Checker {
    cfg: CheckerConfig,
    digest: String,
}

fn quantize(x: f64) -> f64 {
    let q = (x * 1e6).round() / 1e6;
    // Avoid serializing -0.0.
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

impl Checker {
    pub fn new(cfg: CheckerConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let digest = cfg.digest();
        Ok(Self { cfg, digest })
    }

    pub fn config(&self) -> &CheckerConfig {
        &self.cfg
    }

    pub fn config_digest(&self) -> &str {
        &self.digest
    }

    /// Query the backends for one image: unperturbed and every configured
    /// perturbation on the primary, unperturbed only on the secondary. A
    /// primary failure is an error; a secondary failure is recorded.
    pub fn gather(
        &self,
        id: &SampleIdentity,
        prompt: &PromptRecord,
        primary: &mut dyn DetectorBackend,
        secondary: Option<&mut dyn DetectorBackend>,
    ) -> Result<SampleDetections, DetectionError> {
        let labels = [prompt.object_a.clone(), prompt.object_b.clone()];
        let sid = id.sample_id();
        let base = request_detections(primary, &id.image, &labels, None, &format!("{sid}/primary/base"))?;
        let perturbed = self
            .cfg
            .perturbations
            .iter()
            .map(|p| {
                let rid = format!("{sid}/primary/{}", p.key());
                request_detections(primary, &id.image, &labels, Some(*p), &rid)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let secondary = match secondary {
            None => SecondaryDetections::NotRun,
            Some(backend) => {
                let rid = format!("{sid}/secondary/base");
                match request_detections(backend, &id.image, &labels, None, &rid) {
                    Ok(set) => SecondaryDetections::Ok(set),
                    Err(e) => SecondaryDetections::Failed {
                        detector_id: backend.hello().detector_id.clone(),
                        error: e.to_string(),
                    },
                }
            }
        };
        Ok(SampleDetections { primary: base, perturbed, secondary })
    }

    /// Apply the full decision pipeline to already-gathered detections.
    pub fn check(
        &self,
        id: &SampleIdentity,
        prompt: &PromptRecord,
        dets: &SampleDetections,
    ) -> Result<CheckOutcome, CheckError> {
        let cfg = &self.cfg;
        let relation = prompt.relation;
        let primary = &dets.primary;

        let (secondary_verdict, secondary_error) = match &dets.secondary {
            SecondaryDetections::Ok(set) => {
                (SecondaryVerdict::Verdict(decide_set(set, &prompt.object_a, &prompt.object_b, relation, cfg)), None)
            }
            SecondaryDetections::Failed { error, .. } => (SecondaryVerdict::BackendFailed, Some(error.clone())),
            SecondaryDetections::NotRun => (SecondaryVerdict::NotRun, None),
        };

        let sel_a = select_instance(primary, &prompt.object_a, cfg);
        let sel_b = select_instance(primary, &prompt.object_b, cfg);
        let boxes = Boxes { a: sel_a.selected().map(SelectedBox::from), b: sel_b.selected().map(SelectedBox::from) };
        let mut out = CheckOutcome {
            sample_id: id.sample_id(),
            prompt_id: id.prompt_id.clone(),
            method: id.method.clone(),
            seed: id.seed,
            image: id.image.clone(),
            relation,
            verdict: VerdictKind::Undecidable,
            reason: None,
            delta: None,
            conf_det: 0.0,
            conf_geom: 0.0,
            conf_stab: 0.0,
            conf_agree: 0.0,
            confidence: 0.0,
            boxes,
            perturbation_verdicts: Vec::new(),
            secondary_verdict,
            secondary_error,
            config_digest: self.digest.clone(),
        };

        let (a, b) = match (sel_a, sel_b) {
            (Selection::Selected(a), Selection::Selected(b)) => (a, b),
            _ => {
                let reason = sel_a.abstention().or(sel_b.abstention()).expect("one side abstained");
                out.reason = Some(reason);
                return Ok(out);
            }
        };

        let d = relation_delta(&a.bbox, &b.bbox, relation, primary.width, primary.height)?;
        let det = confidence::detection_component(a.score, b.score);
        let geom = confidence::geometry_component(d, cfg.margin, cfg.geom_slope);
        out.delta = Some(quantize(d));

        let gated = if overlap_gate(&a.bbox, &b.bbox, relation, cfg.max_overlap_iou)? == OverlapGate::HighOverlap {
            Some(Reason::HighOverlap)
        } else {
            match decide_geometry(d, relation, cfg.margin) {
                GeometryCall::NearBoundary => Some(Reason::NearBoundary),
                _ => None,
            }
        };
        let (verdict, stab, agree) = match gated {
            Some(reason) => (Verdict::Undecidable(reason), 0.5, 0.5),
            None => {
                let base: Verdict = decide_geometry(d, relation, cfg.margin).into();
                let mut perturbed = Vec::with_capacity(cfg.perturbations.len());
                for p in &cfg.perturbations {
                    let set = dets.perturbed_for(*p).ok_or_else(|| CheckError::MissingPerturbation(p.key()))?;
                    let v = decide_set(set, &prompt.object_a, &prompt.object_b, relation, cfg);
                    out.perturbation_verdicts.push(PerturbationVerdict { perturbation: p.key(), verdict: v });
                    perturbed.push(v);
                }
                let stab = stability_score(base, &perturbed);
                let secondary = match out.secondary_verdict {
                    SecondaryVerdict::Verdict(v) => Some(v),
                    _ => None,
                };
                let agree = confidence::agreement_component(base, secondary);
                let verdict = if rules::is_unstable(stab, cfg) { Verdict::Undecidable(Reason::Unstable) } else { base };
                (verdict, stab, agree)
            }
        };

        out.verdict = verdict.kind();
        out.reason = verdict.reason();
        out.conf_det = quantize(det);
        out.conf_geom = quantize(geom);
        out.conf_stab = quantize(stab);
        out.conf_agree = quantize(agree);
        out.confidence = quantize(confidence::confidence(det, geom, stab, agree, cfg));
        Ok(out)
    }

    /// Gather and check in one step. Returns the detections for caching.
    pub fn check_sample(
        &self,
        id: &SampleIdentity,
        prompt: &PromptRecord,
        primary: &mut dyn DetectorBackend,
        secondary: Option<&mut dyn DetectorBackend>,
    ) -> Result<(CheckOutcome, SampleDetections), CheckError> {
        let dets = self.gather(id, prompt, primary, secondary)?;
        let outcome = self.check(id, prompt, &dets)?;
        Ok((outcome, dets))
    }
}
