//! Subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spatialcheck::audit::{read_sample_csv, stratified_sample, write_sample_csv, ConfidenceBins, Grid, LabelStore};
use spatialcheck::checker::{Checker, CheckerConfig};
use spatialcheck::detection::{serve_mock, DetectorBackend, MockBackend, MockScenes, ProcessBackend};
use spatialcheck::digest::hash_file;
use spatialcheck::mockgen::{self, MockGenOptions, PRIMARY_ID, SECONDARY_ID};
use spatialcheck::prompts::{build_prompts, default_pairs, load_prompts, parse_pairs, write_dataset, Template};
use spatialcheck::report::{emit_report, ReportRun, ReportSpec};
use spatialcheck::run::{
    evaluate_run, prompts_digest, write_json_pretty, Backends, EvalDir, EvalOptions, RunError, RunManifest,
};
use spatialcheck::workflow::{self, AUDIT_METRICS_FILE, CALIBRATION_FILE};
use spatialcheck::ExecMode;

use crate::server;

pub const PRIMARY_CMD_ENV: &str = "SPATIALCHECK_PRIMARY_CMD";
pub const SECONDARY_CMD_ENV: &str = "SPATIALCHECK_SECONDARY_CMD";
pub const SAMPLE_FILE: &str = "sample.csv";

#[derive(Debug, Parser)]
#[command(name = "spatialcheck", version, about = "Abstaining evaluation of spatial relations in generated images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand object pairs into the four-relation prompt set.
    BuildPrompts(BuildPromptsArgs),
    /// Check every image of a run manifest and write an eval directory.
    Evaluate(EvaluateArgs),
    /// Render tables and charts from eval directories.
    Report(ReportArgs),
    /// Draw a stratified audit sample.
    AuditSample(AuditSampleArgs),
    /// Risk–coverage and FPR of the checker against audit labels.
    AuditAnalyze(AuditAnalyzeArgs),
    /// Grid-search margin, detection threshold and τ against audit labels.
    Calibrate(CalibrateArgs),
    /// Serve the label API for the audit UI.
    ServeAudit(ServeAuditArgs),
    /// Write a synthetic scenario: prompts, manifests, images and a scene file.
    MockGen(MockGenArgs),
    /// Run a scripted detector over the line protocol on stdin/stdout.
    MockServe(MockServeArgs),
    /// Label an audit sample from a scenario's ground truth.
    MockLabel(MockLabelArgs),
}

#[derive(Debug, Args)]
pub struct BuildPromptsArgs {
    /// One `object_a,object_b` pair per line; the built-in list when omitted.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "v1.0.1")]
    pub version: String,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Scene file for the in-process scripted detectors.
    #[arg(long, conflicts_with_all = ["primary_cmd", "secondary_cmd"])]
    pub mock_scenes: Option<PathBuf>,
    /// Directory scene keys are relative to; defaults to the scene file's directory.
    #[arg(long, requires = "mock_scenes")]
    pub mock_root: Option<PathBuf>,
    #[arg(long, default_value = PRIMARY_ID)]
    pub mock_primary: String,
    #[arg(long, default_value = SECONDARY_ID)]
    pub mock_secondary: String,
    /// Command line of the primary detector process.
    #[arg(long, env = PRIMARY_CMD_ENV)]
    pub primary_cmd: Option<String>,
    /// Command line of the secondary detector process.
    #[arg(long, env = SECONDARY_CMD_ENV)]
    pub secondary_cmd: Option<String>,
    /// Evaluate without a secondary detector.
    #[arg(long)]
    pub no_secondary: bool,
    /// Per-request backend timeout in seconds.
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    /// Checker config file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Calibration output whose margin and detection threshold are applied.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Overrides the config file and calibration.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Overrides the config file and calibration.
    #[arg(long)]
    pub detection_score: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Process samples on one thread.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub backends: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report config (e.g. a previous `report_config_effective.yaml`).
    #[arg(long, conflicts_with_all = ["prompts", "eval"])]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// `method=eval_dir`, repeatable.
    #[arg(long, value_parser = parse_method_dir)]
    pub eval: Vec<(String, PathBuf)>,
    /// `method=eval_dir` of the uncalibrated baseline, repeatable.
    #[arg(long, value_parser = parse_method_dir)]
    pub uncalibrated: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub audit_labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditSampleArgs {
    /// Eval directories to sample from, repeatable.
    #[arg(long, required = true)]
    pub eval: Vec<PathBuf>,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `sample.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditAnalyzeArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, required = true)]
    pub eval: Vec<PathBuf>,
    /// Confidence thresholds to report operating points at.
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    pub tau: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// JSON grid `{margin: [...], detection_score: [...], tau: [...]}`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, required = true)]
    pub eval: Vec<PathBuf>,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeAuditArgs {
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long, required = true)]
    pub eval: Vec<PathBuf>,
    /// Where `labels_filled.json` / `.csv` are kept; defaults to the sample's directory.
    #[arg(long)]
    pub labels_dir: Option<PathBuf>,
    #[arg(long, default_value = "annotator")]
    pub annotator: String,
    #[arg(long, default_value = "127.0.0.1:8765")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct MockGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "demo")]
    pub run_id: String,
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub detector: String,
    /// Directory scene keys are relative to; defaults to the scene file's directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MockLabelArgs {
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value = "simulated")]
    pub annotator: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method_dir(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((m, d)) if !m.is_empty() && !d.is_empty() => Ok((m.to_string(), PathBuf::from(d))),
        _ => Err(format!("expected `method=dir`, got `{s}`")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildPrompts(a) => build_prompts_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::AuditSample(a) => audit_sample(a),
        Command::AuditAnalyze(a) => audit_analyze(a),
        Command::Calibrate(a) => calibrate(a),
        Command::ServeAudit(a) => serve_audit(a),
        Command::MockGen(a) => mock_gen(a),
        Command::MockServe(a) => mock_serve(a),
        Command::MockLabel(a) => mock_label(a),
    }
}

fn mode(sequential: bool) -> ExecMode {
    if sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn canonical(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}

fn parent_or_dot(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_scenes(path: &Path) -> Result<MockScenes> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(MockScenes::from_json(&text)?)
}

fn build_prompts_cmd(a: BuildPromptsArgs) -> Result<()> {
    let pairs = match &a.pairs {
        Some(p) => parse_pairs(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => default_pairs(),
    };
    let (set, meta) = build_prompts(&pairs, &Template::default(), &a.version)?;
    write_dataset(&a.out, &set, &meta)?;
    println!(
        "{} prompts, {} pairs, {} counterfactual pairs, digest {}",
        meta.total_prompts, meta.object_pairs, meta.counterfactual_pairs, meta.content_digest
    );
    Ok(())
}

fn backends(a: &BackendArgs) -> Result<Backends<'static>> {
    if let Some(scenes_path) = &a.mock_scenes {
        let scenes = Arc::new(load_scenes(scenes_path)?);
        let root = canonical(&a.mock_root.clone().unwrap_or_else(|| parent_or_dot(scenes_path)))?;
        let mock = |id: String, root: PathBuf, scenes: Arc<MockScenes>| -> spatialcheck::run::BackendCtor<'static> {
            Box::new(move || {
                Ok(Box::new(MockBackend::new(scenes.clone(), &id, root.clone())?) as Box<dyn DetectorBackend>)
            })
        };
        return Ok(Backends {
            primary: mock(a.mock_primary.clone(), root.clone(), scenes.clone()),
            secondary: (!a.no_secondary).then(|| mock(a.mock_secondary.clone(), root, scenes)),
        });
    }
    let timeout = Duration::from_secs(a.timeout_secs);
    let process = |cmd: String| -> spatialcheck::run::BackendCtor<'static> {
        Box::new(move || Ok(Box::new(ProcessBackend::spawn_command_line(&cmd, timeout)?) as Box<dyn DetectorBackend>))
    };
    let Some(primary) = a.primary_cmd.clone() else {
        bail!(RunError::Integrity(format!(
            "no primary detector: pass --mock-scenes, --primary-cmd or set {PRIMARY_CMD_ENV}"
        )));
    };
    let secondary = match (&a.secondary_cmd, a.no_secondary) {
        (Some(cmd), false) => Some(process(cmd.clone())),
        _ => None,
    };
    Ok(Backends { primary: process(primary), secondary })
}

/// Config precedence: flags, then calibration, then config file, then defaults.
fn resolve_config(a: &EvaluateArgs) -> Result<(CheckerConfig, Option<spatialcheck::provenance::CalibrationRef>)> {
    let mut cfg = match &a.config {
        Some(p) => CheckerConfig::load(p).with_context(|| format!("loading checker config {}", p.display()))?,
        None => CheckerConfig::default(),
    };
    let mut calibration = None;
    if let Some(path) = &a.calibration {
        let (file, reference) = workflow::load_calibration(path)?;
        let base = cfg.digest();
        if file.base_config_digest != base {
            bail!(RunError::Integrity(format!(
                "calibration {} was fitted on config {}, but this evaluation uses {base}",
                path.display(),
                file.base_config_digest
            )));
        }
        cfg = file.apply(&cfg);
        calibration = Some(reference);
    }
    cfg =
        cfg.with_margin_and_threshold(a.margin.unwrap_or(cfg.margin), a.detection_score.unwrap_or(cfg.detection_score));
    Ok((cfg, calibration))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (cfg, calibration) = resolve_config(&a)?;
    let checker = Checker::new(cfg)?;
    let (prompts, meta) = load_prompts(&a.prompts)?;
    let manifest = RunManifest::load(&canonical(&a.manifest)?)?;
    let summary = evaluate_run(
        &manifest,
        &prompts,
        &checker,
        &a.out,
        EvalOptions {
            k: a.k,
            mode: mode(a.sequential),
            calibration,
            dataset_digest: meta.map(|m| m.content_digest),
            prompts_digest: prompts_digest(&a.prompts)?,
            backends: backends(&a.backends)?,
        },
    )?;
    let m = &summary.metrics.per_image;
    println!(
        "{} / {}: {} images, pass {} fail {} undecidable {}, config {}",
        manifest.run_id,
        manifest.method,
        m.n,
        m.n_pass,
        m.n_fail,
        m.n_undecidable,
        checker.config_digest()
    );
    for w in &summary.provenance.warnings {
        eprintln!("warning: {w}");
    }
    if summary.has_backend_errors() {
        for e in &summary.provenance.errors {
            eprintln!("error: {}: {}", e.sample_id, e.error);
        }
        bail!(RunError::Backend(spatialcheck::detection::DetectionError::Backend {
            detector_id: summary.provenance.backends.primary.detector_id.clone(),
            msg: format!("{} samples failed", summary.provenance.errors.len()),
        }));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let spec = match &a.config {
        Some(p) => ReportSpec::load(p)?,
        None => {
            let Some(prompts) = a.prompts.clone() else {
                bail!(RunError::Integrity("report needs --config or --prompts with --eval".into()));
            };
            let mut runs = Vec::new();
            for (method, dir) in &a.eval {
                let uncalibrated = a.uncalibrated.iter().find(|(m, _)| m == method).map(|(_, d)| d.clone());
                runs.push(ReportRun {
                    method: method.clone(),
                    eval_dir: dir.clone(),
                    uncalibrated_eval_dir: uncalibrated,
                });
            }
            if let Some((m, _)) = a.uncalibrated.iter().find(|(m, _)| !a.eval.iter().any(|(e, _)| e == m)) {
                bail!(RunError::Integrity(format!("--uncalibrated given for `{m}` without a matching --eval")));
            }
            ReportSpec { prompts, k: a.k, runs, audit_labels: a.audit_labels.clone() }
        }
    };
    let meta = emit_report(&spec, &a.out)?;
    println!("wrote {} tables and {} charts to {}", meta.tables.len(), meta.charts.len(), a.out.display());
    Ok(())
}

fn load_evals(dirs: &[PathBuf]) -> Result<Vec<EvalDir>> {
    dirs.iter().map(|d| EvalDir::load(d).with_context(|| format!("loading eval directory {}", d.display()))).collect()
}

fn audit_sample(a: AuditSampleArgs) -> Result<()> {
    let evals = load_evals(&a.eval)?;
    let (prompts, _) = load_prompts(&a.prompts)?;
    let outcomes: Vec<_> = evals.iter().flat_map(|e| e.outcomes.iter().cloned()).collect();
    let sample = stratified_sample(&outcomes, &prompts, a.n, &ConfidenceBins::default(), a.seed)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(SAMPLE_FILE);
    write_sample_csv(fs::File::create(&path)?, &sample)?;
    println!("{} samples written to {}", sample.len(), path.display());
    Ok(())
}

fn audit_analyze(a: AuditAnalyzeArgs) -> Result<()> {
    let evals = load_evals(&a.eval)?;
    let labels = LabelStore::load(&a.labels).with_context(|| format!("reading labels {}", a.labels.display()))?;
    let analysis = workflow::analyze_audit(&evals, &labels, &a.tau)?;
    fs::create_dir_all(&a.out)?;
    write_json_pretty(&a.out.join(AUDIT_METRICS_FILE), &analysis)?;
    for p in &analysis.operating_points {
        println!(
            "tau {:.2}: coverage {:.4} risk {} fpr {:.4} J {:.4}",
            p.tau,
            p.coverage,
            p.risk.map_or("n/a".to_string(), |r| format!("{r:.4}")),
            p.fpr_pass,
            p.j
        );
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let grid = match &a.grid {
        Some(p) => Grid::load(p).with_context(|| format!("reading grid {}", p.display()))?,
        None => Grid::default(),
    };
    let evals = load_evals(&a.eval)?;
    let (prompts, _) = load_prompts(&a.prompts)?;
    let labels = LabelStore::load(&a.labels).with_context(|| format!("reading labels {}", a.labels.display()))?;
    let labels_digest = hash_file(&a.labels)?;
    let file = workflow::calibrate(&evals, &prompts, &labels, &labels_digest, &grid, mode(a.sequential))?;
    let mut analysis = workflow::analyze_audit(&evals, &labels, &grid.tau)?;
    analysis.grid = Some(grid);
    analysis.selected = Some(file.selected());
    fs::create_dir_all(&a.out)?;
    write_json_pretty(&a.out.join(CALIBRATION_FILE), &file)?;
    write_json_pretty(&a.out.join(AUDIT_METRICS_FILE), &analysis)?;
    let s = &file.result.selected;
    println!(
        "selected margin {} detection_score {} tau {} (J {} = {:.4}, coverage {:.4})",
        s.margin, s.detection_score, s.tau, s.j_exact, s.j, s.coverage
    );
    Ok(())
}

fn serve_audit(a: ServeAuditArgs) -> Result<()> {
    let sample =
        read_sample_csv(fs::File::open(&a.sample).with_context(|| format!("opening {}", a.sample.display()))?)?;
    let evals = load_evals(&a.eval)?;
    let served = server::load_samples(sample, &evals)?;
    let labels_dir = a.labels_dir.clone().unwrap_or_else(|| parent_or_dot(&a.sample));
    let store = server::resume_store(&labels_dir)?;
    let state = Arc::new(server::AuditState::new(served, store, labels_dir, a.annotator.clone()));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(state, &a.addr))
}

fn mock_gen(a: MockGenArgs) -> Result<()> {
    let opts = MockGenOptions { run_id: a.run_id, pairs: a.pairs, k: a.k, seed: a.seed, ..MockGenOptions::default() };
    let summary = mockgen::generate(&a.out, &opts)?;
    println!("prompts: {}", summary.prompts_file.display());
    println!("scenes:  {}", summary.scenes_file.display());
    println!("truth:   {}", summary.truth_file.display());
    for (method, path) in &summary.manifests {
        println!("{method}: {}", path.display());
    }
    Ok(())
}

fn mock_serve(a: MockServeArgs) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?;
    let root = canonical(&a.root.clone().unwrap_or_else(|| parent_or_dot(&a.scenes)))?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    serve_mock(&scenes, &a.detector, &root, stdin, stdout)?;
    Ok(())
}

fn mock_label(a: MockLabelArgs) -> Result<()> {
    let sample =
        read_sample_csv(fs::File::open(&a.sample).with_context(|| format!("opening {}", a.sample.display()))?)?;
    let truth = mockgen::load_truth(&a.truth)?;
    let store = workflow::labels_from_truth(&sample, &truth, &a.annotator)?;
    store.save(&a.out)?;
    println!("{} labels written to {}", store.labels().len(), a.out.display());
    Ok(())
}
