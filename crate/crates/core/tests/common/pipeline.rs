//! The whole mock workflow in-process: generate, evaluate, audit, calibrate,
//! re-evaluate and report.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use spatialcheck::audit::{stratified_sample, Grid, LabelStore, LABELS_JSON};
use spatialcheck::checker::{Checker, CheckerConfig};
use spatialcheck::detection::MockScenes;
use spatialcheck::mockgen::{generate, load_truth, mock_backends, MockGenOptions, MockGenSummary};
use spatialcheck::prompts::{load_prompts, PromptSet};
use spatialcheck::report::{emit_report, ReportRun, ReportSpec};
use spatialcheck::run::{
    evaluate_run, prompts_digest, write_json_pretty, EvalDir, EvalOptions, EvalSummary, RunManifest,
};
use spatialcheck::workflow::{calibrate, labels_from_truth, load_calibration, CalibrationFile};
use spatialcheck::ExecMode;

pub struct Pipeline {
    pub root: PathBuf,
    pub summary: MockGenSummary,
    pub prompts: PromptSet,
    /// `(method, uncalibrated eval dir, calibrated eval dir)`.
    pub evals: Vec<(String, PathBuf, PathBuf)>,
    pub labels: LabelStore,
    pub calibration: CalibrationFile,
    pub report_dir: PathBuf,
}

pub fn small_options() -> MockGenOptions {
    MockGenOptions { pairs: 12, ..MockGenOptions::default() }
}

pub fn scenes(summary: &MockGenSummary) -> Arc<MockScenes> {
    Arc::new(MockScenes::from_json(&std::fs::read_to_string(&summary.scenes_file).unwrap()).unwrap())
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_with(
    root: &Path,
    summary: &MockGenSummary,
    prompts: &PromptSet,
    method_manifest: &Path,
    checker: &Checker,
    out: &Path,
    k: usize,
    mode: ExecMode,
    calibration: Option<spatialcheck::provenance::CalibrationRef>,
) -> EvalSummary {
    let manifest = RunManifest::load(method_manifest).unwrap();
    let opts = EvalOptions {
        k,
        mode,
        calibration,
        dataset_digest: None,
        prompts_digest: prompts_digest(&summary.prompts_file).unwrap(),
        backends: mock_backends(scenes(summary), root),
    };
    evaluate_run(&manifest, prompts, checker, out, opts).unwrap()
}

pub fn run_pipeline(root: &Path, opts: &MockGenOptions, audit_n: usize, mode: ExecMode) -> Pipeline {
    let summary = generate(root, opts).unwrap();
    let (prompts, _) = load_prompts(&summary.prompts_file).unwrap();
    let base = Checker::new(CheckerConfig::default()).unwrap();

    let mut uncal = Vec::new();
    for (method, manifest) in &summary.manifests {
        let out = manifest.parent().unwrap().join("eval");
        evaluate_with(root, &summary, &prompts, manifest, &base, &out, opts.k, mode, None);
        uncal.push((method.clone(), manifest.clone(), out));
    }
    let eval_dirs: Vec<EvalDir> = uncal.iter().map(|(_, _, d)| EvalDir::load(d).unwrap()).collect();
    let all: Vec<_> = eval_dirs.iter().flat_map(|e| e.outcomes.clone()).collect();
    let sample = stratified_sample(&all, &prompts, audit_n, &Default::default(), 11).unwrap();
    let truth = load_truth(&summary.truth_file).unwrap();
    let labels = labels_from_truth(&sample, &truth, "simulated").unwrap();
    let audit_dir = root.join("audits/v1");
    labels.save(&audit_dir).unwrap();

    let cal = calibrate(&eval_dirs, &prompts, &labels, "fixture", &Grid::default(), mode).unwrap();
    let cal_path = audit_dir.join("calibration.json");
    write_json_pretty(&cal_path, &cal).unwrap();
    let (cal_file, cal_ref) = load_calibration(&cal_path).unwrap();
    let calibrated = Checker::new(cal_file.apply(&CheckerConfig::default())).unwrap();

    let mut evals = Vec::new();
    let mut runs = Vec::new();
    for (method, manifest, uncal_dir) in uncal {
        let out = manifest.parent().unwrap().join("eval_calibrated");
        evaluate_with(root, &summary, &prompts, &manifest, &calibrated, &out, opts.k, mode, Some(cal_ref.clone()));
        runs.push(ReportRun {
            method: method.clone(),
            eval_dir: out.clone(),
            uncalibrated_eval_dir: Some(uncal_dir.clone()),
        });
        evals.push((method, uncal_dir, out));
    }
    let report_dir = root.join("reports/v1");
    let spec = ReportSpec {
        prompts: summary.prompts_file.clone(),
        k: opts.k,
        runs,
        audit_labels: Some(audit_dir.join(LABELS_JSON)),
    };
    emit_report(&spec, &report_dir).unwrap();

    Pipeline { root: root.to_path_buf(), summary, prompts, evals, labels, calibration: cal_file, report_dir }
}
