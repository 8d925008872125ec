//! Evaluating one generation run: manifest in, `eval/` directory out.
//!
//! Output layout under the eval directory:
//! `per_sample.jsonl`, `detections.jsonl`, `metrics.json`,
//! `provenance.json` and `checker_config.yaml`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{CheckError, CheckOutcome, Checker, SampleDetections, SampleIdentity, SecondaryDetections};
use crate::detection::{BackendHello, DetectionError, DetectorBackend};
use crate::digest::{hash_file, sha256_hex};
use crate::metrics::{
    abstention_breakdown, by_relation_metrics, counterfactual_metrics, per_image_metrics, prompt_metrics,
    AbstentionBreakdown, CounterfactualMetrics, MethodMetrics, MetricsError, PromptLevelMetrics,
};
use crate::parallel::ExecMode;
use crate::prompts::{PromptRecord, PromptSet};
use crate::provenance::{
    timestamp, BackendRecord, CalibrationRef, EvalCounts, EvalProvenance, SampleError, TOOL_NAME, TOOL_VERSION,
};
use crate::relation::Relation;

pub const PER_SAMPLE_FILE: &str = "per_sample.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CONFIG_FILE: &str = "checker_config.yaml";

pub const COUNTERFACTUAL_REDUCTION: &str =
    "per prompt: PASS if any seed passes, else FAIL if any fails, else UNDECIDABLE; \
pairs: both PASS -> both_pass, PASS+FAIL -> one_sided, otherwise undecidable";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Backend(#[from] DetectionError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub run_id: String,
    pub method: String,
    pub prompt_id: String,
    pub seed: u64,
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    pub gen_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub method: String,
    pub records: Vec<ManifestRecord>,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
    pub digest: String,
}

impl RunManifest {
    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self, RunError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord =
                serde_json::from_str(line).map_err(|e| RunError::Manifest { line: i + 1, msg: e.to_string() })?;
            records.push(r);
        }
        let first = records.first().ok_or_else(|| RunError::Integrity("manifest is empty".into()))?.clone();
        let mut keys = BTreeSet::new();
        for r in &records {
            if r.run_id != first.run_id || r.method != first.method {
                return Err(RunError::Integrity(format!(
                    "manifest mixes runs/methods: `{}/{}` and `{}/{}`",
                    first.run_id, first.method, r.run_id, r.method
                )));
            }
            if !keys.insert((r.prompt_id.clone(), r.seed)) {
                return Err(RunError::Integrity(format!(
                    "duplicate manifest entry for prompt `{}` seed {}",
                    r.prompt_id, r.seed
                )));
            }
        }
        Ok(Self { run_id: first.run_id, method: first.method, records, base_dir, digest: sha256_hex(text.as_bytes()) })
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, dir)
    }

    /// Every referenced prompt exists and has exactly `k` seeds.
    pub fn validate(&self, prompts: &PromptSet, k: usize) -> Result<(), RunError> {
        let mut seeds: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.records {
            if prompts.get(&r.prompt_id).is_none() {
                return Err(RunError::Integrity(format!("unknown prompt `{}` in manifest", r.prompt_id)));
            }
            *seeds.entry(&r.prompt_id).or_default() += 1;
        }
        if let Some((p, n)) = seeds.iter().find(|(_, n)| **n != k) {
            return Err(RunError::Integrity(format!("prompt `{p}` has {n} seeds, expected {k}")));
        }
        Ok(())
    }

    pub fn resolve(&self, image: &str) -> PathBuf {
        let p = Path::new(image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub type BackendCtor<'a> = Box<dyn Fn() -> Result<Box<dyn DetectorBackend>, DetectionError> + Sync + Send + 'a>;

/// Constructors for detector connections; each worker opens its own.
pub struct Backends<'a> {
    pub primary: BackendCtor<'a>,
    pub secondary: Option<BackendCtor<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub method: String,
    pub k: usize,
    pub per_image: MethodMetrics,
    /// Over prompts with all `k` seeds evaluated.
    pub prompt_level: Option<PromptLevelMetrics>,
    pub prompts_incomplete: u64,
    /// Over pairs whose both prompts were evaluated.
    pub counterfactual: Option<CounterfactualMetrics>,
    pub pairs_incomplete: u64,
    pub abstention: AbstentionBreakdown,
    pub by_relation: BTreeMap<Relation, MethodMetrics>,
}

/// Aggregate one method's outcomes.
pub fn compute_metrics(
    run_id: &str,
    method: &str,
    outcomes: &[CheckOutcome],
    prompts: &PromptSet,
    k: usize,
) -> Result<RunMetrics, RunError> {
    let per_image = per_image_metrics(outcomes)?;
    let mut seeds: BTreeMap<&str, usize> = BTreeMap::new();
    for o in outcomes {
        *seeds.entry(&o.prompt_id).or_default() += 1;
    }
    let complete: BTreeSet<&str> = seeds.iter().filter(|(_, n)| **n == k).map(|(p, _)| *p).collect();
    let prompts_incomplete = (seeds.len() - complete.len()) as u64;
    let full: Vec<CheckOutcome> =
        outcomes.iter().filter(|o| complete.contains(o.prompt_id.as_str())).cloned().collect();
    let prompt_level = if full.is_empty() { None } else { Some(prompt_metrics(&full, k)?) };

    let pairing = prompts.pairing();
    let paired: Vec<CheckOutcome> = outcomes
        .iter()
        .filter(|o| pairing.get(&o.prompt_id).is_some_and(|q| seeds.contains_key(q.as_str())))
        .cloned()
        .collect();
    let paired_prompts: BTreeSet<&str> = paired.iter().map(|o| o.prompt_id.as_str()).collect();
    let pairs_incomplete = (seeds.len() - paired_prompts.len()) as u64;
    let counterfactual = if paired.is_empty() { None } else { Some(counterfactual_metrics(&paired, &pairing)?) };
    Ok(RunMetrics {
        run_id: run_id.to_string(),
        method: method.to_string(),
        k,
        per_image,
        prompt_level,
        prompts_incomplete,
        counterfactual,
        pairs_incomplete,
        abstention: abstention_breakdown(outcomes),
        by_relation: by_relation_metrics(outcomes)?,
    })
}

/// One line of `detections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedDetections {
    pub sample_id: String,
    pub detections: SampleDetections,
}

pub struct EvalOptions<'a> {
    pub k: usize,
    pub mode: ExecMode,
    pub calibration: Option<CalibrationRef>,
    pub dataset_digest: Option<String>,
    pub prompts_digest: String,
    pub backends: Backends<'a>,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub outcomes: Vec<CheckOutcome>,
    pub metrics: RunMetrics,
    pub provenance: EvalProvenance,
}

impl EvalSummary {
    pub fn has_backend_errors(&self) -> bool {
        !self.provenance.errors.is_empty()
    }
}

enum SampleResult {
    Done(Box<(CheckOutcome, SampleDetections)>),
    MissingImage(String),
    Error(SampleError),
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), RunError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Check every manifest image and write the eval directory.
pub fn evaluate_run(
    manifest: &RunManifest,
    prompts: &PromptSet,
    checker: &Checker,
    out_dir: &Path,
    opts: EvalOptions<'_>,
) -> Result<EvalSummary, RunError> {
    let started_at = timestamp();
    manifest.validate(prompts, opts.k)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    // Handshake once up front so a dead primary fails fast.
    let probe = (opts.backends.primary)()?;
    let primary_hello = probe.hello().clone();
    drop(probe);
    let mut warnings = Vec::new();
    let secondary_hello: Option<BackendHello> = match &opts.backends.secondary {
        None => None,
        Some(ctor) => match ctor() {
            Ok(b) => Some(b.hello().clone()),
            Err(e) => {
                warnings.push(format!("secondary detector unavailable: {e}"));
                None
            }
        },
    };

    let backends = &opts.backends;
    let results = opts.mode.map_init(
        &manifest.records,
        || {
            let primary = (backends.primary)();
            let secondary = backends.secondary.as_ref().map(|ctor| ctor().map_err(|e| e.to_string()));
            (primary, secondary)
        },
        |(primary, secondary), rec| {
            let id = SampleIdentity {
                prompt_id: rec.prompt_id.clone(),
                method: rec.method.clone(),
                seed: rec.seed,
                image: rec.image.clone(),
            };
            let path = manifest.resolve(&rec.image);
            if !path.is_file() {
                return SampleResult::MissingImage(format!(
                    "{}: image not found at {}",
                    id.sample_id(),
                    path.display()
                ));
            }
            let prompt: &PromptRecord = prompts.get(&rec.prompt_id).expect("manifest validated");
            let primary = match primary {
                Ok(p) => p,
                Err(e) => return SampleResult::Error(SampleError { sample_id: id.sample_id(), error: e.to_string() }),
            };
            let path_str = path.to_string_lossy().into_owned();
            let wire_id = SampleIdentity { image: path_str, ..id.clone() };
            let sec_failure = match secondary {
                Some(Err(e)) => Some(e.clone()),
                _ => None,
            };
            let gathered = match secondary {
                Some(Ok(b)) => checker.gather(&wire_id, prompt, primary.as_mut(), Some(&mut **b)),
                _ => checker.gather(&wire_id, prompt, primary.as_mut(), None),
            };
            let mut dets = match gathered {
                Ok(d) => d,
                Err(e) => return SampleResult::Error(SampleError { sample_id: id.sample_id(), error: e.to_string() }),
            };
            if let Some(err) = sec_failure {
                dets.secondary = SecondaryDetections::Failed { detector_id: "secondary".into(), error: err };
            }
            match checker.check(&id, prompt, &dets) {
                Ok(o) => SampleResult::Done(Box::new((o, dets))),
                Err(e) => SampleResult::Error(SampleError { sample_id: id.sample_id(), error: e.to_string() }),
            }
        },
    );

    let mut outcomes = Vec::new();
    let mut cache = Vec::new();
    let mut errors = Vec::new();
    let mut missing = 0u64;
    for r in results {
        match r {
            SampleResult::Done(b) => {
                let (o, d) = *b;
                cache.push(CachedDetections { sample_id: o.sample_id.clone(), detections: d });
                outcomes.push(o);
            }
            SampleResult::MissingImage(w) => {
                missing += 1;
                warnings.push(w);
            }
            SampleResult::Error(e) => errors.push(e),
        }
    }
    if outcomes.is_empty() {
        return Err(match errors.first() {
            Some(e) => RunError::Backend(DetectionError::Backend {
                detector_id: primary_hello.detector_id.clone(),
                msg: format!("no sample could be evaluated; first error: {}", e.error),
            }),
            None => RunError::Integrity("no manifest image could be found".into()),
        });
    }

    write_lines(&out_dir.join(PER_SAMPLE_FILE), outcomes.iter().map(CheckOutcome::to_json_line))?;
    write_lines(
        &out_dir.join(DETECTIONS_FILE),
        cache.iter().map(|c| serde_json::to_string(c).expect("cache serializes")),
    )?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, checker.config().to_canonical_text()).map_err(io_err(&config_path))?;

    let metrics = compute_metrics(&manifest.run_id, &manifest.method, &outcomes, prompts, opts.k)?;
    write_json_pretty(&out_dir.join(METRICS_FILE), &metrics)?;

    let provenance = EvalProvenance {
        tool: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        run_id: manifest.run_id.clone(),
        method: manifest.method.clone(),
        k: opts.k,
        manifest_digest: manifest.digest.clone(),
        image_root: manifest.base_dir.to_string_lossy().into_owned(),
        prompts_digest: opts.prompts_digest.clone(),
        dataset_digest: opts.dataset_digest.clone(),
        config_digest: checker.config_digest().to_string(),
        config_file: CONFIG_FILE.into(),
        backends: BackendRecord { primary: primary_hello, secondary: secondary_hello },
        calibration: opts.calibration.clone(),
        counterfactual_reduction: COUNTERFACTUAL_REDUCTION.into(),
        counts: EvalCounts {
            manifest: manifest.records.len() as u64,
            evaluated: outcomes.len() as u64,
            excluded_missing_image: missing,
            errors: errors.len() as u64,
        },
        warnings,
        errors,
        started_at,
        finished_at: timestamp(),
    };
    write_json_pretty(&out_dir.join(PROVENANCE_FILE), &provenance)?;
    Ok(EvalSummary { outcomes, metrics, provenance })
}

/// Read `per_sample.jsonl`, validating each line.
pub fn load_outcomes(path: &Path) -> Result<Vec<CheckOutcome>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| CheckOutcome::from_json_line(l).map_err(|msg| RunError::Manifest { line: i + 1, msg }))
        .collect()
}

pub fn load_detection_cache(path: &Path) -> Result<BTreeMap<String, SampleDetections>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: CachedDetections =
            serde_json::from_str(line).map_err(|e| RunError::Manifest { line: i + 1, msg: e.to_string() })?;
        out.insert(c.sample_id, c.detections);
    }
    Ok(out)
}

/// Everything stored in one eval directory.
#[derive(Debug, Clone)]
pub struct EvalDir {
    pub path: PathBuf,
    pub outcomes: Vec<CheckOutcome>,
    pub provenance: EvalProvenance,
    pub config: crate::checker::CheckerConfig,
    pub config_digest: String,
}

impl EvalDir {
    /// Load and cross-check an eval directory: a single config digest across
    /// all outcomes, matching the stored config file and provenance.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let outcomes = load_outcomes(&path.join(PER_SAMPLE_FILE))?;
        let prov_path = path.join(PROVENANCE_FILE);
        let provenance: EvalProvenance =
            serde_json::from_str(&fs::read_to_string(&prov_path).map_err(io_err(&prov_path))?)?;
        let cfg_path = path.join(CONFIG_FILE);
        let config = crate::checker::CheckerConfig::load(&cfg_path)
            .map_err(|e| RunError::Integrity(format!("{}: {e}", cfg_path.display())))?;
        let digest = config.digest();
        let digests: BTreeSet<&str> = outcomes.iter().map(|o| o.config_digest.as_str()).collect();
        if digests.len() > 1 {
            return Err(RunError::Integrity(format!(
                "{} mixes {} checker config digests",
                path.display(),
                digests.len()
            )));
        }
        if let Some(d) = digests.first() {
            if *d != digest {
                return Err(RunError::Integrity(format!(
                    "{}: outcomes were produced under config {d}, stored config hashes to {digest}",
                    path.display()
                )));
            }
        }
        if provenance.config_digest != digest {
            return Err(RunError::Integrity(format!(
                "{}: provenance config digest does not match stored config",
                path.display()
            )));
        }
        Ok(Self { path: path.to_path_buf(), outcomes, provenance, config, config_digest: digest })
    }
}

/// Digest of the prompt file an evaluation used.
pub fn prompts_digest(path: &Path) -> Result<String, RunError> {
    hash_file(path).map_err(io_err(path))
}
