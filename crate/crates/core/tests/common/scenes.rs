//! Random synthetic detection scenes, expressed both for the oracle and for
//! the crate.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatialcheck::checker::{
    CheckOutcome, Checker, CheckerConfig, SampleDetections, SampleIdentity, SecondaryDetections, Weights,
};
use spatialcheck::detection::{
    BoundingBox, Detection, DetectionSet, DetectorBackend, MockBackend, MockDetector, MockImage, MockScenes,
    Perturbation, ScriptedDetections, WireDetection,
};
use spatialcheck::prompts::PromptRecord;
use spatialcheck::relation::Relation;

use super::oracle;

pub const PRIMARY: &str = "primary";
pub const SECONDARY: &str = "secondary";
pub const IMAGE: &str = "img.png";

#[derive(Debug, Clone)]
pub struct RawDet {
    pub label: String,
    pub score: f64,
    pub b: [f64; 4],
}

#[derive(Debug, Clone)]
pub enum RawSecondary {
    Frame { floor: f64, dets: Vec<RawDet> },
    Failed,
    Absent,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub w: f64,
    pub h: f64,
    pub floor: f64,
    pub a: String,
    pub b: String,
    pub relation: Relation,
    pub base: Vec<RawDet>,
    /// One list per standard perturbation, in order.
    pub perturbed: Vec<Vec<RawDet>>,
    pub secondary: RawSecondary,
    pub cfg: CheckerConfig,
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn score(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.6) {
        // Coarse grid so ties and exact threshold hits occur.
        rng.random_range(2..=19) as f64 * 0.05
    } else {
        rng.random_range(0.0..1.0)
    }
}

fn rand_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> [f64; 4] {
    let bw = rng.random_range(4..=(w as i64 / 2)) as f64;
    let bh = rng.random_range(4..=(h as i64 / 2)) as f64;
    let x = rng.random_range(0..=(w - bw) as i64) as f64;
    let y = rng.random_range(0..=(h - bh) as i64) as f64;
    [x, y, x + bw, y + bh]
}

/// Box with a given integer center, clipped into the frame.
fn box_at(cx: f64, cy: f64, half: f64, w: f64, h: f64) -> [f64; 4] {
    let x1 = (cx - half).max(0.0);
    let x2 = (cx + half).min(w);
    let y1 = (cy - half).max(0.0);
    let y2 = (cy + half).min(h);
    [x1, y1, x2.max(x1 + 1.0), y2.max(y1 + 1.0)]
}

fn label_variant(rng: &mut ChaCha8Rng, l: &str) -> String {
    if rng.random_bool(0.15) {
        l.to_uppercase()
    } else {
        l.to_string()
    }
}

fn random_dets(rng: &mut ChaCha8Rng, a: &str, b: &str, w: f64, h: f64, floor: f64) -> Vec<RawDet> {
    let n = rng.random_range(0..=5);
    (0..n)
        .map(|_| {
            let label = match rng.random_range(0..5) {
                0 | 1 => label_variant(rng, a),
                2 | 3 => label_variant(rng, b),
                _ => "other".to_string(),
            };
            RawDet { label, score: score(rng).max(floor), b: rand_box(rng, w, h) }
        })
        .collect()
}

/// One clean A and one clean B at a chosen center offset, sometimes with a
/// distractor.
fn structured_dets(rng: &mut ChaCha8Rng, s: &Scene) -> Vec<RawDet> {
    let (w, h) = (s.w, s.h);
    let horizontal = s.relation.is_horizontal();
    let side = if horizontal { w } else { h };
    // Offsets as whole pixels; multiples of side/100 hit the margin exactly.
    let offset = if rng.random_bool(0.3) {
        (rng.random_range(-15..=15) as f64 * side / 100.0).round()
    } else {
        rng.random_range(-(side as i64) / 2..=(side as i64) / 2) as f64
    };
    let mid_x = (w / 2.0).round();
    let mid_y = (h / 2.0).round();
    let half_a = rng.random_range(10..=60) as f64;
    let half_b = rng.random_range(10..=60) as f64;
    let (ca, cb) = if horizontal {
        ((mid_x + offset / 2.0).round(), (mid_x - offset / 2.0).round())
    } else {
        ((mid_y + offset / 2.0).round(), (mid_y - offset / 2.0).round())
    };
    let cross = rng.random_range(80..=(if horizontal { h } else { w }) as i64 - 80) as f64;
    let (box_a, box_b) = if horizontal {
        (box_at(ca, cross, half_a, w, h), box_at(cb, cross, half_b, w, h))
    } else {
        (box_at(cross, ca, half_a, w, h), box_at(cross, cb, half_b, w, h))
    };
    let hi = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.8) {
            rng.random_range(0.6..1.0)
        } else {
            score(rng)
        }
    };
    let mut out = vec![
        RawDet { label: label_variant(rng, &s.a), score: hi(rng).max(s.floor), b: box_a },
        RawDet { label: label_variant(rng, &s.b), score: hi(rng).max(s.floor), b: box_b },
    ];
    if rng.random_bool(0.25) {
        let l = if rng.random_bool(0.5) { s.a.clone() } else { s.b.clone() };
        out.push(RawDet { label: l, score: score(rng).max(s.floor), b: rand_box(rng, w, h) });
    }
    if rng.random_bool(0.5) {
        out.swap(0, 1);
    }
    out
}

fn jitter(rng: &mut ChaCha8Rng, dets: &[RawDet], w: f64, h: f64, floor: f64) -> Vec<RawDet> {
    let mut out = Vec::new();
    for d in dets {
        if !rng.random_bool(0.85) {
            continue;
        }
        out.push({
            let dx = rng.random_range(-40..=40) as f64;
            let dy = rng.random_range(-40..=40) as f64;
            let bw = d.b[2] - d.b[0];
            let bh = d.b[3] - d.b[1];
            let x1 = (d.b[0] + dx).clamp(0.0, w - bw);
            let y1 = (d.b[1] + dy).clamp(0.0, h - bh);
            RawDet {
                label: d.label.clone(),
                score: (d.score + rng.random_range(-0.1..0.1)).clamp(floor, 1.0),
                b: [x1, y1, x1 + bw, y1 + bh],
            }
        });
    }
    if rng.random_bool(0.1) {
        out.extend(random_dets(rng, &dets.first().map(|d| d.label.clone()).unwrap_or_default(), "other", w, h, floor));
    }
    out
}

pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let w = pick(rng, &[400.0, 500.0, 512.0, 640.0]);
    let h = pick(rng, &[400.0, 500.0, 512.0, 480.0]);
    let relation = pick(rng, &Relation::ALL);
    let (a, b) = pick(rng, &[("cat", "dog"), ("cup", "bowl"), ("traffic light", "bench")]);
    let weights = if rng.random_bool(0.7) {
        Weights::default()
    } else {
        let raw: [f64; 4] = [
            rng.random_range(0.05..1.0),
            rng.random_range(0.05..1.0),
            rng.random_range(0.05..1.0),
            rng.random_range(0.05..1.0),
        ];
        let s: f64 = raw.iter().sum();
        let (det, geom, stab) = (raw[0] / s, raw[1] / s, raw[2] / s);
        Weights { det, geom, stab, agree: 1.0 - det - geom - stab }
    };
    let cfg = CheckerConfig {
        detection_score: pick(rng, &[0.2, 0.3, 0.4, 0.5]),
        min_area_fraction: pick(rng, &[0.0, 0.005, 0.01]),
        ambiguity_delta: pick(rng, &[0.0, 0.05, 0.1, 0.2]),
        max_overlap_iou: pick(rng, &[0.3, 0.5]),
        margin: pick(rng, &[0.03, 0.05, 0.07, 0.1]),
        consistency_threshold: pick(rng, &[0.25, 0.5, 0.75]),
        geom_slope: pick(rng, &[0.1, 0.15]),
        weights,
        epsilon: 1e-6,
        perturbations: Perturbation::standard_set(),
    };
    let floor = pick(rng, &[0.0, 0.3, 0.5]);
    let mut s = Scene {
        w,
        h,
        floor,
        a: a.to_string(),
        b: b.to_string(),
        relation,
        base: Vec::new(),
        perturbed: Vec::new(),
        secondary: RawSecondary::Absent,
        cfg,
    };
    s.base = if rng.random_bool(0.7) { structured_dets(rng, &s) } else { random_dets(rng, a, b, w, h, floor) };
    s.perturbed = (0..4)
        .map(|_| match rng.random_range(0..10) {
            0..=5 => s.base.clone(),
            6..=8 => jitter(rng, &s.base, w, h, floor),
            _ => random_dets(rng, a, b, w, h, floor),
        })
        .collect();
    s.secondary = match rng.random_range(0..10) {
        0 => RawSecondary::Failed,
        1 => RawSecondary::Absent,
        _ => {
            let f2 = pick(rng, &[0.0, 0.35]);
            let dets =
                if rng.random_bool(0.7) { jitter(rng, &s.base, w, h, f2) } else { random_dets(rng, a, b, w, h, f2) };
            RawSecondary::Frame { floor: f2, dets }
        }
    };
    s
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl Scene {
    pub fn prompt(&self) -> PromptRecord {
        PromptRecord {
            prompt_id: format!("000_{}", self.relation),
            object_a: self.a.clone(),
            object_b: self.b.clone(),
            relation: self.relation,
            text: format!("A photo of a {} {} a {}.", self.a, self.relation, self.b),
            pair_id: "pair_000".into(),
            counterfactual_id: format!("000_{}", self.relation.inverse()),
            axis_group: self.relation.axis(),
        }
    }

    pub fn identity(&self) -> SampleIdentity {
        SampleIdentity {
            prompt_id: format!("000_{}", self.relation),
            method: "synthetic".into(),
            seed: 0,
            image: IMAGE.into(),
        }
    }

    fn set(&self, id: &str, floor: f64, dets: &[RawDet], p: Option<Perturbation>) -> DetectionSet {
        DetectionSet {
            detector_id: id.into(),
            backend_score_floor: floor,
            width: self.w,
            height: self.h,
            perturbation: p,
            detections: dets
                .iter()
                .map(|d| Detection {
                    label: d.label.clone(),
                    score: d.score,
                    bbox: BoundingBox::new(d.b[0], d.b[1], d.b[2], d.b[3]).unwrap(),
                })
                .collect(),
            warnings: Vec::new(),
        }
    }

    /// Detections as the crate would have gathered them.
    pub fn detections(&self) -> SampleDetections {
        let perturbed = self
            .cfg
            .perturbations
            .iter()
            .zip(&self.perturbed)
            .map(|(p, d)| self.set(PRIMARY, self.floor, d, Some(*p)))
            .collect();
        let secondary = match &self.secondary {
            RawSecondary::Frame { floor, dets } => SecondaryDetections::Ok(self.set(SECONDARY, *floor, dets, None)),
            RawSecondary::Failed => {
                SecondaryDetections::Failed { detector_id: SECONDARY.into(), error: "scripted".into() }
            }
            RawSecondary::Absent => SecondaryDetections::NotRun,
        };
        SampleDetections { primary: self.set(PRIMARY, self.floor, &self.base, None), perturbed, secondary }
    }

    fn frame(&self, floor: f64, dets: &[RawDet]) -> oracle::Frame {
        oracle::Frame {
            w: self.w,
            h: self.h,
            floor,
            dets: dets.iter().map(|d| oracle::Det { label: d.label.clone(), score: d.score, b: d.b }).collect(),
        }
    }

    pub fn oracle_case(&self) -> oracle::Case {
        oracle::Case {
            a: self.a.clone(),
            b: self.b.clone(),
            relation: self.relation.as_str(),
            base: self.frame(self.floor, &self.base),
            perturbed: self.perturbed.iter().map(|d| self.frame(self.floor, d)).collect(),
            secondary: match &self.secondary {
                RawSecondary::Frame { floor, dets } => oracle::Secondary::Frame(self.frame(*floor, dets)),
                RawSecondary::Failed => oracle::Secondary::Failed,
                RawSecondary::Absent => oracle::Secondary::Absent,
            },
        }
    }

    pub fn oracle_params(&self) -> oracle::Params {
        let c = &self.cfg;
        oracle::Params {
            t_det: c.detection_score,
            min_area_fraction: c.min_area_fraction,
            delta: c.ambiguity_delta,
            max_iou: c.max_overlap_iou,
            margin: c.margin,
            consistency: c.consistency_threshold,
            gamma: c.geom_slope,
            weights: [c.weights.det, c.weights.geom, c.weights.stab, c.weights.agree],
            eps: c.epsilon,
        }
    }

    fn wire(dets: &[RawDet]) -> Vec<WireDetection> {
        dets.iter().map(|d| WireDetection { label: d.label.clone(), score: d.score, bbox: d.b }).collect()
    }

    /// The same scene as a scripted mock scene file.
    pub fn mock_scenes(&self) -> MockScenes {
        let mut scenes = MockScenes::default();
        scenes.detectors.insert(PRIMARY.into(), MockDetector { score_floor: self.floor });
        let mut detections = BTreeMap::new();
        let overrides =
            self.cfg.perturbations.iter().zip(&self.perturbed).map(|(p, d)| (p.key(), Self::wire(d))).collect();
        detections
            .insert(PRIMARY.to_string(), ScriptedDetections { base: Self::wire(&self.base), overrides, fail: false });
        match &self.secondary {
            RawSecondary::Frame { floor, dets } => {
                scenes.detectors.insert(SECONDARY.into(), MockDetector { score_floor: *floor });
                detections
                    .insert(SECONDARY.to_string(), ScriptedDetections { base: Self::wire(dets), ..Default::default() });
            }
            RawSecondary::Failed => {
                scenes.detectors.insert(SECONDARY.into(), MockDetector { score_floor: 0.0 });
                detections.insert(SECONDARY.to_string(), ScriptedDetections { fail: true, ..Default::default() });
            }
            RawSecondary::Absent => {}
        }
        scenes.images.insert(IMAGE.into(), MockImage { width: self.w as u32, height: self.h as u32, detections });
        scenes
    }

    /// Run `check_sample` through in-process mock backends.
    pub fn check_via_mock(&self, checker: &Checker) -> CheckOutcome {
        let scenes = Arc::new(self.mock_scenes());
        let mut primary = MockBackend::new(scenes.clone(), PRIMARY, PathBuf::new()).unwrap();
        let mut secondary = match self.secondary {
            RawSecondary::Absent => None,
            _ => Some(MockBackend::new(scenes, SECONDARY, PathBuf::new()).unwrap()),
        };
        let sec = secondary.as_mut().map(|b| b as &mut dyn DetectorBackend);
        checker.check_sample(&self.identity(), &self.prompt(), &mut primary, sec).unwrap().0
    }
}

/// Compare a crate outcome with the oracle: verdict and reason exactly,
/// confidence components to the 1e-6 output quantum.
pub fn matches_oracle(o: &CheckOutcome, e: &oracle::Expected) -> Result<(), String> {
    let verdict = o.verdict.to_string();
    let reason = o.reason.map(|r| r.to_string());
    if verdict != e.verdict || reason.as_deref() != e.reason {
        return Err(format!("verdict {verdict}/{reason:?} but oracle says {}/{:?}", e.verdict, e.reason));
    }
    let pairs = [
        ("det", o.conf_det, e.det),
        ("geom", o.conf_geom, e.geom),
        ("stab", o.conf_stab, e.stab),
        ("agree", o.conf_agree, e.agree),
        ("overall", o.confidence, e.overall),
    ];
    for (name, got, want) in pairs {
        if (got - want).abs() > 2e-6 {
            return Err(format!("{name}: {got} vs oracle {want}"));
        }
    }
    Ok(())
}
