//! Detector-facing data plane: boxes, detection sets, perturbation names, and
//! the backend abstraction the checker pulls detections through.
//!
//! Backends report absolute pixel coordinates; ingestion clamps them to the
//! image rectangle and enforces the backend's declared score floor. The core
//! never filters by score or area here, that is checker policy.

mod mock;
mod protocol;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use mock::{serve as serve_mock, MockBackend, MockDetector, MockImage, MockScenes, ScriptedDetections};
pub use protocol::{
    BackendHello, DetectRequest, DetectResponse, HelloLine, LineBackend, ProcessBackend, WireDetection,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("degenerate box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("protocol error at line {line}: {msg}")]
    Protocol { line: usize, msg: String },
    #[error("backend `{detector_id}` failed: {msg}")]
    Backend { detector_id: String, msg: String },
    #[error("unknown perturbation `{0}`")]
    UnknownPerturbation(String),
}

impl DetectionError {
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, DetectionError::Backend { .. })
    }
}

/// Axis-aligned box in absolute pixels, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, DetectionError> {
        let all_finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !all_finite || x1 >= x2 || y1 >= y2 {
            return Err(DetectionError::DegenerateBox(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    fn check(&self) -> Result<(), DetectionError> {
        if self.area() > 0.0 {
            Ok(())
        } else {
            Err(DetectionError::DegenerateBox(self.x1, self.y1, self.x2, self.y2))
        }
    }

    /// Clamp to `[0, w] × [0, h]`. Returns `None` if nothing is left, and
    /// whether any coordinate moved.
    pub fn clamp_to(&self, w: f64, h: f64) -> (Option<BoundingBox>, bool) {
        let c = BoundingBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        let moved = c != *self;
        if c.x1 < c.x2 && c.y1 < c.y2 {
            (Some(c), moved)
        } else {
            (None, moved)
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 for disjoint boxes, 1 for identical ones.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, DetectionError> {
    a.check()?;
    b.check()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.as_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BoundingBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// A named image perturbation. Backends apply it; the core only names it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum Perturbation {
    Brightness(f64),
    Blur(f64),
    Resize(f64),
}

impl Perturbation {
    /// Brightness ×1.1 and ×0.9, Gaussian blur σ=1, resize ×0.9.
    pub fn standard_set() -> Vec<Perturbation> {
        vec![
            Perturbation::Brightness(1.1),
            Perturbation::Brightness(0.9),
            Perturbation::Blur(1.0),
            Perturbation::Resize(0.9),
        ]
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::Brightness(_) => "brightness",
            Perturbation::Blur(_) => "blur",
            Perturbation::Resize(_) => "resize",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            Perturbation::Brightness(p) | Perturbation::Blur(p) | Perturbation::Resize(p) => p,
        }
    }

    /// Stable string key, e.g. `blur:1` or `brightness:1.1`.
    pub fn key(&self) -> String {
        format!("{}:{}", self.kind(), self.param())
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for Perturbation {
    type Err = DetectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || DetectionError::UnknownPerturbation(s.to_string());
        let (kind, param) = s.split_once(':').ok_or_else(unknown)?;
        let p: f64 = param.trim().parse().map_err(|_| unknown())?;
        match kind.trim() {
            "brightness" => Ok(Perturbation::Brightness(p)),
            "blur" => Ok(Perturbation::Blur(p)),
            "resize" => Ok(Perturbation::Resize(p)),
            _ => Err(unknown()),
        }
    }
}

/// Everything one detector reported on one (possibly perturbed) image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detector_id: String,
    pub backend_score_floor: f64,
    pub width: f64,
    pub height: f64,
    pub perturbation: Option<Perturbation>,
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DetectionSet {
    /// Validate and normalize a backend response. Out-of-frame boxes are
    /// clamped (with a warning); a detection under the declared floor is a
    /// protocol violation.
    pub fn ingest(
        hello: &BackendHello,
        perturbation: Option<Perturbation>,
        width: f64,
        height: f64,
        raw: Vec<WireDetection>,
        line: usize,
    ) -> Result<DetectionSet, DetectionError> {
        let protocol = |msg: String| DetectionError::Protocol { line, msg };
        if !(width > 0.0 && height > 0.0) {
            return Err(protocol(format!("non-positive image size {width}x{height}")));
        }
        let mut detections = Vec::with_capacity(raw.len());
        let mut warnings = Vec::new();
        for (i, d) in raw.into_iter().enumerate() {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(protocol(format!("detection {i} score {} outside [0,1]", d.score)));
            }
            if d.score < hello.score_floor {
                return Err(protocol(format!(
                    "detection {i} score {} below declared floor {}",
                    d.score, hello.score_floor
                )));
            }
            let [x1, y1, x2, y2] = d.bbox;
            let bbox = BoundingBox::new(x1, y1, x2, y2).map_err(|e| protocol(format!("detection {i}: {e}")))?;
            match bbox.clamp_to(width, height) {
                (Some(b), moved) => {
                    if moved {
                        warnings.push(format!("detection {i} ({}) clamped to image bounds", d.label));
                    }
                    detections.push(Detection { label: d.label, score: d.score, bbox: b });
                }
                (None, _) => warnings.push(format!("detection {i} ({}) lies outside the image; dropped", d.label)),
            }
        }
        Ok(DetectionSet {
            detector_id: hello.detector_id.clone(),
            backend_score_floor: hello.score_floor,
            width,
            height,
            perturbation,
            detections,
            warnings,
        })
    }
}

/// A detector reachable through the request/response protocol.
pub trait DetectorBackend: Send {
    fn hello(&self) -> &BackendHello;
    fn detect(&mut self, request: &DetectRequest) -> Result<DetectResponse, DetectionError>;
    /// Line number of the last response read, for protocol diagnostics.
    fn last_line(&self) -> usize {
        0
    }
}

/// Ask `backend` for every detection of `labels` on `image` (optionally
/// perturbed) and ingest the result.
pub fn request_detections(
    backend: &mut dyn DetectorBackend,
    image: &str,
    labels: &[String],
    perturbation: Option<Perturbation>,
    request_id: &str,
) -> Result<DetectionSet, DetectionError> {
    let request = DetectRequest {
        image: image.to_string(),
        labels: labels.to_vec(),
        perturbation,
        request_id: request_id.to_string(),
    };
    let response = backend.detect(&request)?;
    let line = backend.last_line();
    let hello = backend.hello().clone();
    match response {
        DetectResponse::Ok { request_id, width, height, detections } => {
            if request_id != request.request_id {
                return Err(DetectionError::Protocol {
                    line,
                    msg: format!("response id `{request_id}` does not match request `{}`", request.request_id),
                });
            }
            DetectionSet::ingest(&hello, perturbation, f64::from(width), f64::from(height), detections, line)
        }
        DetectResponse::Err { error, .. } => {
            Err(DetectionError::Backend { detector_id: hello.detector_id, msg: error })
        }
    }
}
