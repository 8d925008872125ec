//! Local HTTP label API for the audit UI.
//!
//! Sample listings are blind: they carry the prompt and image but never the
//! checker verdict or confidence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use spatialcheck::audit::{AuditLabel, AuditSample, LabelStore, SubmitOutcome, LABELS_JSON};
use spatialcheck::checker::{CheckOutcome, VerdictKind};
use spatialcheck::provenance::timestamp;
use spatialcheck::run::{load_detection_cache, EvalDir, RunError, DETECTIONS_FILE};

/// What the server knows about one sampled image.
#[derive(Debug, Clone)]
pub struct ServedSample {
    pub sample: AuditSample,
    pub image_path: PathBuf,
    pub boxes: SampleBoxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Selected boxes for overlay drawing: A in red, B in blue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBoxes {
    pub sample_id: String,
    pub width: f64,
    pub height: f64,
    pub a: Option<LabeledBox>,
    pub b: Option<LabeledBox>,
}

/// Entry of `GET /api/audit/samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindSample {
    pub index: usize,
    pub sample_id: String,
    pub prompt_id: String,
    pub prompt_text: String,
    pub image_url: String,
    pub boxes_url: String,
    /// Verdict this annotator already committed, if any.
    pub label: Option<VerdictKind>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct LabelRequest {
    pub sample_id: String,
    pub verdict: VerdictKind,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelResponse {
    pub status: &'static str,
    pub label: AuditLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub previous: Option<VerdictKind>,
    pub labeled: usize,
    pub total: usize,
}

pub struct AuditState {
    samples: Vec<ServedSample>,
    index: BTreeMap<String, usize>,
    store: Mutex<LabelStore>,
    labels_dir: PathBuf,
    annotator: String,
}

impl AuditState {
    /// `store` is typically the existing `labels_filled.json`, so a restarted
    /// session resumes where it left off.
    pub fn new(samples: Vec<ServedSample>, store: LabelStore, labels_dir: PathBuf, annotator: String) -> Self {
        let index = samples.iter().enumerate().map(|(i, s)| (s.sample.sample_id.clone(), i)).collect();
        Self { samples, index, store: Mutex::new(store), labels_dir, annotator }
    }

    pub fn store(&self) -> LabelStore {
        self.store.lock().expect("label store lock").clone()
    }

    fn sample(&self, id: &str) -> Option<&ServedSample> {
        self.index.get(id).map(|i| &self.samples[*i])
    }
}

fn box_of(o: &CheckOutcome, a: bool) -> Option<LabeledBox> {
    let b = if a { o.boxes.a.as_ref() } else { o.boxes.b.as_ref() };
    b.map(|b| LabeledBox { label: b.label.clone(), bbox: b.bbox.as_array() })
}

/// Join an audit sample list with its eval directories.
pub fn load_samples(sample: Vec<AuditSample>, evals: &[EvalDir]) -> anyhow::Result<Vec<ServedSample>> {
    let mut outcomes: BTreeMap<&str, (&CheckOutcome, &EvalDir)> = BTreeMap::new();
    for e in evals {
        for o in &e.outcomes {
            outcomes.insert(o.sample_id.as_str(), (o, e));
        }
    }
    let mut sizes: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for e in evals {
        for (id, d) in load_detection_cache(&e.path.join(DETECTIONS_FILE))? {
            sizes.insert(id, (d.primary.width, d.primary.height));
        }
    }
    sample
        .into_iter()
        .map(|s| {
            let Some((o, e)) = outcomes.get(s.sample_id.as_str()) else {
                return Err(
                    RunError::Integrity(format!("sample `{}` is not in any eval directory", s.sample_id)).into()
                );
            };
            let image = Path::new(&s.image);
            let image_path =
                if image.is_absolute() { image.to_path_buf() } else { Path::new(&e.provenance.image_root).join(image) };
            let (width, height) = sizes.get(&s.sample_id).copied().unwrap_or((0.0, 0.0));
            let boxes =
                SampleBoxes { sample_id: s.sample_id.clone(), width, height, a: box_of(o, true), b: box_of(o, false) };
            Ok(ServedSample { sample: s, image_path, boxes })
        })
        .collect()
}

pub fn router(state: Arc<AuditState>) -> Router {
    Router::new()
        .route("/api/audit/samples", get(list_samples))
        .route("/api/audit/image/{id}", get(image))
        .route("/api/audit/boxes/{id}", get(boxes))
        .route("/api/audit/label", post(label))
        .route("/api/audit/export", get(export))
        .with_state(state)
}

fn not_found(id: &str) -> Response {
    (StatusCode::NOT_FOUND, format!("unknown sample `{id}`")).into_response()
}

async fn list_samples(State(state): State<Arc<AuditState>>) -> Json<Vec<BlindSample>> {
    let store = state.store.lock().expect("label store lock");
    Json(
        state
            .samples
            .iter()
            .enumerate()
            .map(|(index, s)| {
                let id = &s.sample.sample_id;
                BlindSample {
                    index,
                    sample_id: id.clone(),
                    prompt_id: s.sample.prompt_id.clone(),
                    prompt_text: s.sample.prompt_text.clone(),
                    image_url: format!("/api/audit/image/{id}"),
                    boxes_url: format!("/api/audit/boxes/{id}"),
                    label: store.get(id, &state.annotator).map(|l| l.verdict),
                }
            })
            .collect(),
    )
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(State(state): State<Arc<AuditState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(s) = state.sample(&id) else {
        return not_found(&id);
    };
    match tokio::fs::read(&s.image_path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&s.image_path))], bytes).into_response(),
        Err(e) => (StatusCode::NOT_FOUND, format!("image for `{id}` unavailable: {e}")).into_response(),
    }
}

async fn boxes(State(state): State<Arc<AuditState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.sample(&id) {
        Some(s) => Json(s.boxes.clone()).into_response(),
        None => not_found(&id),
    }
}

async fn label(State(state): State<Arc<AuditState>>, Json(req): Json<LabelRequest>) -> Response {
    if state.sample(&req.sample_id).is_none() {
        return not_found(&req.sample_id);
    }
    let annotator = req.annotator.unwrap_or_else(|| state.annotator.clone());
    let mut store = state.store.lock().expect("label store lock");
    let outcome = store.submit(AuditLabel {
        sample_id: req.sample_id.clone(),
        verdict: req.verdict,
        annotator: annotator.clone(),
        timestamp: timestamp(),
    });
    if outcome != SubmitOutcome::Unchanged {
        if let Err(e) = store.save(&state.labels_dir) {
            return (StatusCode::INTERNAL_SERVER_ERROR, format!("persisting labels failed: {e}")).into_response();
        }
    }
    let (status, previous) = match outcome {
        SubmitOutcome::Created => ("created", None),
        SubmitOutcome::Unchanged => ("unchanged", None),
        SubmitOutcome::Replaced { previous } => ("replaced", Some(previous)),
    };
    let stored = store.get(&req.sample_id, &annotator).expect("just submitted").clone();
    let labeled = state.samples.iter().filter(|s| store.get(&s.sample.sample_id, &annotator).is_some()).count();
    Json(LabelResponse { status, label: stored, previous, labeled, total: state.samples.len() }).into_response()
}

async fn export(State(state): State<Arc<AuditState>>) -> Response {
    let text = state.store.lock().expect("label store lock").to_json();
    ([(header::CONTENT_TYPE, "application/json")], text).into_response()
}

/// Load labels from `dir` if a previous session left any.
pub fn resume_store(dir: &Path) -> anyhow::Result<LabelStore> {
    let path = dir.join(LABELS_JSON);
    if path.is_file() {
        LabelStore::load(&path).with_context(|| format!("reading {}", path.display()))
    } else {
        Ok(LabelStore::default())
    }
}

pub async fn serve(state: Arc<AuditState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    eprintln!("audit API listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
