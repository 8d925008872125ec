use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spatialcheck::audit::LABELS_JSON;
use spatialcheck::checker::CheckOutcome;
use spatialcheck::mockgen::{PRIMARY_ID, SCENES_FILE, SECONDARY_ID};
use spatialcheck::run::{EvalDir, PER_SAMPLE_FILE};

const BIN: &str = env!("CARGO_BIN_EXE_spatialcheck");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SPATIALCHECK_PRIMARY_CMD")
        .env_remove("SPATIALCHECK_SECONDARY_CMD")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Demo {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Demo {
    fn new(pairs: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["mock-gen", "--out", s(&root), "--pairs", pairs]);
        Demo { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn evaluate(&self, method: &str, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.p(out);
        let manifest = self.p(&format!("runs/demo/{method}/manifest.jsonl"));
        let scenes = self.p(SCENES_FILE);
        let prompts = self.p("prompts/prompts.jsonl");
        let mut args = vec!["evaluate", "--manifest", s(&manifest), "--prompts", s(&prompts), "--out", s(&out)];
        if !extra.iter().any(|a| a.ends_with("-cmd")) {
            args.extend(["--mock-scenes", s(&scenes)]);
        }
        args.extend(extra);
        ok(&args);
        out
    }
}

fn outcomes(dir: &Path) -> Vec<CheckOutcome> {
    fs::read_to_string(dir.join(PER_SAMPLE_FILE))
        .unwrap()
        .lines()
        .map(|l| CheckOutcome::from_json_line(l).unwrap())
        .collect()
}

#[test]
fn full_pipeline_through_the_binary() {
    let d = Demo::new("10");
    let methods = ["prompt_only", "boxdiff", "gligen"];
    let evals: Vec<PathBuf> = methods.iter().map(|m| d.evaluate(m, &format!("eval/{m}"), &[])).collect();
    let eval_args: Vec<String> = evals.iter().map(|e| e.display().to_string()).collect();
    let prompts = d.p("prompts/prompts.jsonl");
    let audit = d.p("audits/v1");

    let mut args = vec!["audit-sample", "--prompts", s(&prompts), "--n", "90", "--seed", "3", "--out", s(&audit)];
    for e in &eval_args {
        args.extend(["--eval", e]);
    }
    ok(&args);
    let sample = audit.join("sample.csv");
    ok(&["mock-label", "--sample", s(&sample), "--truth", s(&d.p("truth.jsonl")), "--out", s(&audit)]);
    let labels = audit.join(LABELS_JSON);

    let analysis = audit.join("analysis_v1");
    let mut args = vec!["audit-analyze", "--labels", s(&labels), "--out", s(&analysis)];
    for e in &eval_args {
        args.extend(["--eval", e]);
    }
    ok(&args);
    assert!(analysis.join("audit_metrics.json").is_file());

    let mut args = vec!["calibrate", "--labels", s(&labels), "--prompts", s(&prompts), "--out", s(&audit)];
    for e in &eval_args {
        args.extend(["--eval", e]);
    }
    ok(&args);
    let calibration = audit.join("calibration.json");
    let cal: serde_json::Value = serde_json::from_str(&fs::read_to_string(&calibration).unwrap()).unwrap();
    assert_eq!(cal["result"]["points"].as_array().unwrap().len(), 36);

    let mut report = vec![
        "report".to_string(),
        "--prompts".into(),
        prompts.display().to_string(),
        "--audit-labels".into(),
        labels.display().to_string(),
        "--out".into(),
        d.p("reports/v1").display().to_string(),
    ];
    for m in methods {
        let calibrated = d.evaluate(m, &format!("eval_cal/{m}"), &["--calibration", s(&calibration)]);
        let loaded = EvalDir::load(&calibrated).unwrap();
        let applied = loaded.provenance.calibration.unwrap();
        assert_eq!(applied.tau, cal["tau"].as_f64().unwrap());
        assert_eq!(loaded.config.margin, cal["margin"].as_f64().unwrap());
        report.extend(["--eval".into(), format!("{m}={}", calibrated.display())]);
        report.extend(["--uncalibrated".into(), format!("{m}={}", d.p(&format!("eval/{m}")).display())]);
    }
    let report: Vec<&str> = report.iter().map(String::as_str).collect();
    ok(&report);
    for t in [
        "main_results.csv",
        "prompt_metrics.csv",
        "by_relation.csv",
        "counterfactual.csv",
        "abstention_breakdown.csv",
        "calibration_deltas.csv",
    ] {
        assert!(d.p("reports/v1/tables").join(t).is_file(), "{t}");
    }
    assert!(d.p("reports/v1/assets/risk_coverage.svg").is_file());

    // Flags override the calibration file.
    let flagged = d.evaluate("gligen", "eval_flag", &["--calibration", s(&calibration), "--margin", "0.09"]);
    assert_eq!(EvalDir::load(&flagged).unwrap().config.margin, 0.09);
}

#[test]
fn process_backend_matches_in_process_mock() {
    let d = Demo::new("3");
    let scenes = d.p(SCENES_FILE);
    let mock = d.evaluate("boxdiff", "eval_mock", &[]);
    let primary = format!("{BIN} mock-serve --scenes {} --detector {PRIMARY_ID}", s(&scenes));
    let secondary = format!("{BIN} mock-serve --scenes {} --detector {SECONDARY_ID}", s(&scenes));
    let proc = d.evaluate("boxdiff", "eval_proc", &["--primary-cmd", &primary, "--secondary-cmd", &secondary]);
    let strip = |mut o: CheckOutcome| {
        o.secondary_error = o.secondary_error.map(|_| String::new());
        o
    };
    let a: Vec<_> = outcomes(&mock).into_iter().map(strip).collect();
    let b: Vec<_> = outcomes(&proc).into_iter().map(strip).collect();
    assert_eq!(a, b);
    let prov = EvalDir::load(&proc).unwrap().provenance;
    assert_eq!(prov.backends.primary.detector_id, PRIMARY_ID);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let d = Demo::new("2");
    let manifest = d.p("runs/demo/gligen/manifest.jsonl");
    let prompts = d.p("prompts/prompts.jsonl");
    let scenes = d.p(SCENES_FILE);
    let out = d.p("eval_x");
    let base = ["evaluate", "--manifest", s(&manifest), "--prompts", s(&prompts), "--out", s(&out)];

    // Seed count mismatch is an integrity failure.
    let mut args = base.to_vec();
    args.extend(["--mock-scenes", s(&scenes), "--k", "3"]);
    assert_eq!(code(&args), 2);

    // A detector that cannot start is a backend failure.
    let mut args = base.to_vec();
    args.extend(["--primary-cmd", "/nonexistent/detector"]);
    assert_eq!(code(&args), 3);

    // A detector that speaks garbage is a backend failure too.
    let mut args = base.to_vec();
    args.extend(["--primary-cmd", "echo not-json"]);
    assert_eq!(code(&args), 3);

    // Malformed config.
    let bad = d.p("bad.yaml");
    fs::write(&bad, "margin: -1\n").unwrap();
    let mut args = base.to_vec();
    args.extend(["--mock-scenes", s(&scenes), "--config", s(&bad)]);
    assert_eq!(code(&args), 2);

    // Calibration fitted under a different base config.
    let cal = d.p("cal.json");
    let other = serde_json::json!({
        "tool": "spatialcheck", "tool_version": "0", "created_at": "2026-01-01T00:00:00Z",
        "margin": 0.05, "detection_score": 0.3, "tau": 0.5,
        "base_config_digest": "0000", "labels_digest": "x",
        "grid": {"margin": [0.05], "detection_score": [0.3], "tau": [0.5]},
        "result": {"n_audited": 0, "points": [], "selected": {
            "margin": 0.05, "detection_score": 0.3, "tau": 0.5, "fpr_pass": 0.0, "fpr_pass_excl_undecidable": 0.0,
            "risk": null, "coverage": 0.0, "j": 0.5, "j_exact": "1/2", "degenerate": true,
            "n_covered": 0, "n_scored": 0, "equivalence_class": 0}}
    });
    fs::write(&cal, other.to_string()).unwrap();
    let mut args = base.to_vec();
    args.extend(["--mock-scenes", s(&scenes), "--calibration", s(&cal)]);
    assert_eq!(code(&args), 2);

    // No backend configured at all.
    assert_eq!(code(&base), 2);
    // Unreadable input.
    assert_eq!(code(&["build-prompts", "--pairs", "/nonexistent/pairs.txt", "--out", s(&d.p("p"))]), 1);
}

#[test]
fn build_prompts_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = ok(&["build-prompts", "--out", s(&a)]);
    ok(&["build-prompts", "--out", s(&b)]);
    assert!(first.starts_with("200 prompts, 50 pairs, 100 counterfactual pairs"), "{first}");
    for f in ["prompts.jsonl", "dataset_meta.json", "sha256.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
