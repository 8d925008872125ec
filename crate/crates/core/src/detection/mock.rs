//! Deterministic scripted detector used by tests, demos and the acceptance
//! suite. A scene file maps image keys to per-detector scripted detections,
//! with optional per-perturbation replacement lists and scripted crashes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::protocol::{BackendHello, DetectRequest, DetectResponse, HelloLine, WireDetection};
use super::{DetectionError, DetectionSet, DetectorBackend, Perturbation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockDetector {
    pub score_floor: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDetections {
    #[serde(default)]
    pub base: Vec<WireDetection>,
    /// Perturbation key (e.g. `blur:1`) → replacement detection list.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, Vec<WireDetection>>,
    /// Every request for this image fails.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fail: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockImage {
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub detections: BTreeMap<String, ScriptedDetections>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScenes {
    pub detectors: BTreeMap<String, MockDetector>,
    pub images: BTreeMap<String, MockImage>,
}

impl MockScenes {
    pub fn from_json(text: &str) -> Result<Self, DetectionError> {
        let scenes: MockScenes = serde_json::from_str(text)
            .map_err(|e| DetectionError::Protocol { line: e.line(), msg: format!("scene file: {e}") })?;
        scenes.validate()?;
        Ok(scenes)
    }

    /// Every override key must name a known perturbation kind.
    pub fn validate(&self) -> Result<(), DetectionError> {
        for image in self.images.values() {
            for scripted in image.detections.values() {
                for key in scripted.overrides.keys() {
                    key.parse::<Perturbation>()?;
                }
            }
        }
        Ok(())
    }

    pub fn hello(&self, detector_id: &str) -> Option<BackendHello> {
        self.detectors
            .get(detector_id)
            .map(|d| BackendHello { detector_id: detector_id.to_string(), score_floor: d.score_floor })
    }

    /// Wire-level response for one request.
    pub fn respond(&self, detector_id: &str, image_key: &str, request: &DetectRequest) -> DetectResponse {
        let err = |error: String| DetectResponse::Err { request_id: request.request_id.clone(), error };
        let Some(image) = self.images.get(image_key) else {
            return err(format!("unknown image `{image_key}`"));
        };
        let scripted = image.detections.get(detector_id).cloned().unwrap_or_default();
        if scripted.fail {
            return err(format!("scripted failure of `{detector_id}`"));
        }
        let list = request.perturbation.and_then(|p| scripted.overrides.get(&p.key())).unwrap_or(&scripted.base);
        let wanted: Vec<String> = request.labels.iter().map(|l| l.to_lowercase()).collect();
        let detections = list.iter().filter(|d| wanted.contains(&d.label.to_lowercase())).cloned().collect();
        DetectResponse::Ok {
            request_id: request.request_id.clone(),
            width: image.width,
            height: image.height,
            detections,
        }
    }

    /// Scripted detections for `image_key`, ingested as a detection set.
    pub fn mock_detect(
        &self,
        detector_id: &str,
        image_key: &str,
        labels: &[String],
        perturbation: Option<Perturbation>,
    ) -> Result<DetectionSet, DetectionError> {
        let mut backend = MockBackend::new(Arc::new(self.clone()), detector_id, PathBuf::new())?;
        super::request_detections(&mut backend, image_key, labels, perturbation, "mock")
    }
}

/// In-process backend over a scene file. Request paths are resolved relative
/// to `base_dir` before lookup.
pub struct MockBackend {
    scenes: Arc<MockScenes>,
    hello: BackendHello,
    base_dir: PathBuf,
}

impl MockBackend {
    pub fn new(scenes: Arc<MockScenes>, detector_id: &str, base_dir: PathBuf) -> Result<Self, DetectionError> {
        let hello = scenes.hello(detector_id).ok_or_else(|| DetectionError::Backend {
            detector_id: detector_id.to_string(),
            msg: "detector not declared in scene file".into(),
        })?;
        Ok(Self { scenes, hello, base_dir: normalize(&base_dir) })
    }

    fn key_for(&self, image: &str) -> String {
        let p = normalize(Path::new(image));
        let rel = p.strip_prefix(&self.base_dir).unwrap_or(&p);
        rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
    }
}

impl DetectorBackend for MockBackend {
    fn hello(&self) -> &BackendHello {
        &self.hello
    }

    fn detect(&mut self, request: &DetectRequest) -> Result<DetectResponse, DetectionError> {
        let key = self.key_for(&request.image);
        Ok(self.scenes.respond(&self.hello.detector_id, &key, request))
    }
}

/// Lexical normalization: drops `.` components and resolves `..` where possible.
fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Run the line protocol for one scripted detector until `input` closes.
pub fn serve<R: BufRead, W: Write>(
    scenes: &MockScenes,
    detector_id: &str,
    base_dir: &Path,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    let mut backend = match MockBackend::new(Arc::new(scenes.clone()), detector_id, base_dir.to_path_buf()) {
        Ok(b) => b,
        Err(e) => {
            writeln!(output, "{}", serde_json::json!({ "error": e.to_string() }))?;
            return output.flush();
        }
    };
    let hello = HelloLine { hello: backend.hello.clone() };
    writeln!(output, "{}", serde_json::to_string(&hello)?)?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<DetectRequest>(&line) {
            Ok(req) => backend.detect(&req).expect("mock never fails at transport level"),
            Err(e) => DetectResponse::Err { request_id: String::new(), error: format!("malformed request: {e}") },
        };
        writeln!(output, "{}", serde_json::to_string(&reply)?)?;
        output.flush()?;
    }
    Ok(())
}
