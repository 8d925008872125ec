mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use proptest::prelude::*;
use serde_json::json;

use common::fixtures::random_run;
use common::pipeline::{evaluate_with, run_pipeline, scenes, small_options};
use common::scenes::rng;
use spatialcheck::audit::{
    reevaluate_cached, stratified_sample, AuditError, AuditLabel, CachedSample, ConfidenceBins, LABELS_JSON,
};
use spatialcheck::checker::{Checker, CheckerConfig, Reason, VerdictKind};
use spatialcheck::detection::{MockScenes, Perturbation};
use spatialcheck::digest::hash_file;
use spatialcheck::mockgen::{generate, mock_backends, MockGenOptions, PRIMARY_ID, SECONDARY_ID};
use spatialcheck::prompts::{build_prompts, ObjectPair, PromptSet, Template};
use spatialcheck::report::{emit_report, ReportMeta, ReportRun, ReportSpec, META_FILE, TABLES_DIR};
use spatialcheck::run::{
    evaluate_run, load_detection_cache, EvalDir, EvalOptions, ManifestRecord, RunError, RunManifest, CONFIG_FILE,
    DETECTIONS_FILE, PER_SAMPLE_FILE,
};
use spatialcheck::ExecMode;

const W: u32 = 512;

fn bx(cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn det(label: &str, score: f64, b: [f64; 4]) -> serde_json::Value {
    json!({"label": label, "score": score, "box": b})
}

/// One pair, four prompts, two seeds: eight images with known verdicts.
struct HandRun {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    prompts: PromptSet,
    manifest: RunManifest,
    scenes: Arc<MockScenes>,
    expected: BTreeMap<String, (VerdictKind, Option<Reason>)>,
}

fn hand_run() -> HandRun {
    use VerdictKind::*;
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (prompts, _) = build_prompts(&[ObjectPair::new("cat", "dog")], &Template::default(), "hand").unwrap();
    let run_dir = root.join("runs/hand/m");
    fs::create_dir_all(run_dir.join("images")).unwrap();

    let mut images = serde_json::Map::new();
    let mut records = Vec::new();
    let mut expected = BTreeMap::new();
    let flips: Vec<String> = Perturbation::standard_set().iter().take(3).map(|p| p.to_string()).collect();
    for rec in prompts.records() {
        let (a, b) = (rec.object_a.as_str(), rec.object_b.as_str());
        for seed in 0..2u64 {
            let name = format!("images/{}_s{seed}.png", rec.prompt_id);
            fs::write(run_dir.join(&name), b"img").unwrap();
            let mut secondary = None;
            let mut overrides = serde_json::Map::new();
            let (base, want) = match (rec.relation.as_str(), seed) {
                ("left_of", 0) => (
                    vec![det(a, 0.9, bx(100.0, 256.0, 80.0, 80.0)), det(b, 0.9, bx(400.0, 256.0, 80.0, 80.0))],
                    (Pass, None),
                ),
                ("left_of", _) => (
                    vec![det(a, 0.9, bx(200.0, 256.0, 300.0, 300.0)), det(b, 0.9, bx(280.0, 256.0, 300.0, 300.0))],
                    (Undecidable, Some(Reason::HighOverlap)),
                ),
                ("right_of", 0) => (
                    vec![det(a, 0.9, bx(100.0, 256.0, 80.0, 80.0)), det(b, 0.9, bx(400.0, 256.0, 80.0, 80.0))],
                    (Fail, None),
                ),
                ("right_of", _) => (
                    vec![
                        det(a, 0.80, bx(400.0, 256.0, 80.0, 80.0)),
                        det(a, 0.75, bx(420.0, 300.0, 80.0, 80.0)),
                        det(b, 0.9, bx(100.0, 256.0, 80.0, 80.0)),
                    ],
                    (Undecidable, Some(Reason::Ambiguous)),
                ),
                ("above", 0) => (
                    vec![det(a, 0.9, bx(150.0, 240.0, 80.0, 80.0)), det(b, 0.9, bx(350.0, 270.0, 80.0, 80.0))],
                    (Undecidable, Some(Reason::NearBoundary)),
                ),
                ("above", _) => {
                    let flipped =
                        vec![det(a, 0.9, bx(256.0, 400.0, 80.0, 80.0)), det(b, 0.9, bx(256.0, 100.0, 80.0, 80.0))];
                    for k in &flips {
                        overrides.insert(k.clone(), json!(flipped));
                    }
                    (
                        vec![det(a, 0.9, bx(256.0, 100.0, 80.0, 80.0)), det(b, 0.9, bx(256.0, 400.0, 80.0, 80.0))],
                        (Undecidable, Some(Reason::Unstable)),
                    )
                }
                ("below", 0) => (
                    vec![det(a, 0.9, bx(256.0, 400.0, 20.0, 20.0)), det(b, 0.9, bx(256.0, 100.0, 80.0, 80.0))],
                    (Undecidable, Some(Reason::Missing)),
                ),
                _ => {
                    secondary = Some(vec![
                        det(a, 0.9, bx(256.0, 100.0, 80.0, 80.0)),
                        det(b, 0.9, bx(256.0, 400.0, 80.0, 80.0)),
                    ]);
                    (
                        vec![det(a, 0.9, bx(256.0, 400.0, 80.0, 80.0)), det(b, 0.9, bx(256.0, 100.0, 80.0, 80.0))],
                        (Pass, None),
                    )
                }
            };
            let secondary = secondary.unwrap_or_else(|| base.clone());
            images.insert(
                format!("runs/hand/m/{name}"),
                json!({
                    "width": W, "height": W,
                    "detections": {
                        PRIMARY_ID: {"base": base, "overrides": overrides},
                        SECONDARY_ID: {"base": secondary},
                    }
                }),
            );
            let r = ManifestRecord {
                run_id: "hand".into(),
                method: "m".into(),
                prompt_id: rec.prompt_id.clone(),
                seed,
                image: name,
                gen_digest: "none".into(),
            };
            expected.insert(format!("m__{}__s{seed}", rec.prompt_id), want);
            records.push(serde_json::to_string(&r).unwrap());
        }
    }
    let scenes = json!({
        "detectors": {PRIMARY_ID: {"score_floor": 0.25}, SECONDARY_ID: {"score_floor": 0.25}},
        "images": images,
    });
    let scenes = Arc::new(MockScenes::from_json(&scenes.to_string()).unwrap());
    let manifest_path = run_dir.join("manifest.jsonl");
    fs::write(&manifest_path, records.join("\n") + "\n").unwrap();
    let manifest = RunManifest::load(&manifest_path).unwrap();
    HandRun { _dir: dir, root, prompts, manifest, scenes, expected }
}

fn evaluate_hand(h: &HandRun, k: usize, out: &Path) -> Result<spatialcheck::run::EvalSummary, RunError> {
    let checker = Checker::new(CheckerConfig::default()).unwrap();
    evaluate_run(
        &h.manifest,
        &h.prompts,
        &checker,
        out,
        EvalOptions {
            k,
            mode: ExecMode::Parallel,
            calibration: None,
            dataset_digest: None,
            prompts_digest: "hand".into(),
            backends: mock_backends(h.scenes.clone(), &h.root),
        },
    )
}

#[test]
fn hand_built_manifest_matches_expectations() {
    let h = hand_run();
    let out = h.root.join("eval");
    let summary = evaluate_hand(&h, 2, &out).unwrap();
    assert_eq!(summary.outcomes.len(), 8, "{:?}", summary.provenance.errors);
    for o in &summary.outcomes {
        assert_eq!(h.expected[&o.sample_id], (o.verdict, o.reason), "{}", o.sample_id);
    }
    let by_id: BTreeMap<&str, _> = summary.outcomes.iter().map(|o| (o.sample_id.as_str(), o)).collect();
    let clean = by_id["m__000_left_of__s0"];
    assert!((clean.confidence - 0.9f64.powf(0.4)).abs() < 1e-5, "{}", clean.confidence);
    let contradicted = by_id["m__000_below__s1"];
    assert_eq!(contradicted.conf_agree, 0.0);
    assert!((contradicted.confidence - 0.9f64.powf(0.4) * 1e-6f64.powf(0.1)).abs() < 1e-4);
    for reason in [Reason::Missing, Reason::Ambiguous] {
        let o = summary.outcomes.iter().find(|o| o.reason == Some(reason)).unwrap();
        assert_eq!(o.confidence, 0.0);
    }
    let m = &summary.metrics;
    assert_eq!((m.per_image.n_pass, m.per_image.n_fail, m.per_image.n_undecidable), (2, 1, 5));
    assert!(Reason::ALL.iter().all(|r| m.abstention.count(*r) == 1));
}

#[test]
fn missing_image_is_excluded_and_counted() {
    let h = hand_run();
    fs::remove_file(h.root.join("runs/hand/m/images/000_above_s1.png")).unwrap();
    let summary = evaluate_hand(&h, 2, &h.root.join("eval")).unwrap();
    assert_eq!(summary.outcomes.len(), 7);
    assert!(summary.outcomes.iter().all(|o| o.sample_id != "m__000_above__s1"));
    assert_eq!(summary.provenance.counts.excluded_missing_image, 1);
    assert_eq!(summary.provenance.warnings.len(), 1);
    assert_eq!(summary.metrics.prompts_incomplete, 1);
    assert_eq!(summary.metrics.prompt_level.as_ref().unwrap().prompts, 3);
}

#[test]
fn seed_count_mismatch_is_an_integrity_error() {
    let h = hand_run();
    let err = evaluate_hand(&h, 3, &h.root.join("eval")).unwrap_err();
    assert!(matches!(err, RunError::Integrity(_)), "{err}");
}

#[test]
fn cached_reevaluation_matches_live_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let opts = small_options();
    let summary = generate(root, &opts).unwrap();
    let (prompts, _) = spatialcheck::prompts::load_prompts(&summary.prompts_file).unwrap();
    let (_, manifest) = &summary.manifests[0];
    let base = Checker::new(CheckerConfig::default()).unwrap();
    let cached_dir = root.join("cached");
    evaluate_with(root, &summary, &prompts, manifest, &base, &cached_dir, opts.k, ExecMode::Parallel, None);
    let eval = EvalDir::load(&cached_dir).unwrap();
    let mut cache = load_detection_cache(&cached_dir.join(DETECTIONS_FILE)).unwrap();
    let samples: Vec<CachedSample> = eval
        .outcomes
        .iter()
        .map(|o| CachedSample {
            identity: o.identity(),
            prompt: prompts.get(&o.prompt_id).unwrap().clone(),
            detections: cache.remove(&o.sample_id).unwrap(),
        })
        .collect();
    for (m, t) in [(0.03, 0.2), (0.07, 0.3), (0.10, 0.4)] {
        let cfg = CheckerConfig::default().with_margin_and_threshold(m, t);
        let live_dir = root.join(format!("live_{m}_{t}"));
        let live = evaluate_with(
            root,
            &summary,
            &prompts,
            manifest,
            &Checker::new(cfg).unwrap(),
            &live_dir,
            opts.k,
            ExecMode::Sequential,
            None,
        );
        let want: Vec<(VerdictKind, f64)> = live.outcomes.iter().map(|o| (o.verdict, o.confidence)).collect();
        let got = reevaluate_cached(&CheckerConfig::default(), &samples, m, t).unwrap();
        assert_eq!(got, want, "margin {m}, threshold {t}");
    }
}

#[test]
fn generated_scenario_is_deterministic_and_covers_every_reason() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let opts = MockGenOptions::default();
    let sa = generate(a.path(), &opts).unwrap();
    let sb = generate(b.path(), &opts).unwrap();
    for (x, y) in
        [(&sa.scenes_file, &sb.scenes_file), (&sa.truth_file, &sb.truth_file), (&sa.prompts_file, &sb.prompts_file)]
    {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    for ((_, x), (_, y)) in sa.manifests.iter().zip(&sb.manifests) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }

    let (prompts, _) = spatialcheck::prompts::load_prompts(&sa.prompts_file).unwrap();
    let checker = Checker::new(CheckerConfig::default()).unwrap();
    let mut pass_rates = BTreeMap::new();
    let mut reasons = BTreeSet::new();
    for (method, manifest) in &sa.manifests {
        let s = evaluate_with(
            a.path(),
            &sa,
            &prompts,
            manifest,
            &checker,
            &a.path().join(method),
            opts.k,
            ExecMode::Parallel,
            None,
        );
        assert_eq!(s.outcomes.len(), opts.pairs * 4 * opts.k);
        pass_rates.insert(method.clone(), s.metrics.per_image.pass_rate_exact());
        reasons.extend(s.outcomes.iter().filter_map(|o| o.reason));
        // Scripted secondary crashes are recorded, not fatal.
        assert!(s.outcomes.iter().any(|o| o.secondary_error.is_some()));
    }
    assert_eq!(reasons.len(), Reason::ALL.len());
    assert!(pass_rates["prompt_only"] < pass_rates["boxdiff"]);
    assert!(pass_rates["boxdiff"] < pass_rates["gligen"]);
}

fn tables(dir: &Path) -> BTreeMap<String, String> {
    fs::read_dir(dir.join(TABLES_DIR))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap())
        })
        .collect()
}

#[test]
fn report_is_idempotent_and_digests_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_pipeline(dir.path(), &small_options(), 120, ExecMode::Parallel);
    let first = tables(&p.report_dir);
    let spec: ReportSpec = serde_json::from_str(
        &fs::read_to_string(p.report_dir.join(spatialcheck::report::EFFECTIVE_CONFIG_FILE)).unwrap(),
    )
    .unwrap();
    let again = dir.path().join("again");
    emit_report(&spec, &again).unwrap();
    assert_eq!(first, tables(&again));

    let meta: ReportMeta = serde_json::from_str(&fs::read_to_string(p.report_dir.join(META_FILE)).unwrap()).unwrap();
    assert_eq!(meta.inputs.len(), p.evals.len());
    assert_eq!(meta.calibration_tau, Some(p.calibration.tau));
    for input in &meta.inputs {
        let eval = Path::new(&input.eval_dir);
        assert_eq!(input.per_sample_digest, hash_file(eval.join(PER_SAMPLE_FILE)).unwrap());
        assert_eq!(input.config_digest, hash_file(eval.join(CONFIG_FILE)).unwrap());
        let loaded = EvalDir::load(eval).unwrap();
        assert_eq!(
            loaded.provenance.manifest_digest,
            hash_file(p.root.join(format!("runs/demo/{}/manifest.jsonl", input.method))).unwrap()
        );
        assert_eq!(loaded.provenance.calibration.as_ref().unwrap().tau, p.calibration.tau);
    }
}

#[test]
fn report_on_a_subset_of_methods_skips_other_labels() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_pipeline(dir.path(), &small_options(), 120, ExecMode::Parallel);
    let (method, uncal, cal) = p.evals.last().unwrap().clone();
    assert!(p.labels.labels().iter().any(|l| !l.sample_id.starts_with(&format!("{method}__"))));
    let labels_dir = dir.path().join("labels");
    p.labels.save(&labels_dir).unwrap();
    let runs = vec![ReportRun { method: method.clone(), eval_dir: cal, uncalibrated_eval_dir: Some(uncal) }];
    let mut spec = ReportSpec {
        prompts: p.summary.prompts_file.clone(),
        k: 4,
        runs,
        audit_labels: Some(labels_dir.join(LABELS_JSON)),
    };
    emit_report(&spec, &dir.path().join("subset")).unwrap();

    // A label for a reported method must still match one of its samples.
    let mut labels = p.labels.clone();
    labels.submit(AuditLabel {
        sample_id: format!("{method}__nope__s0"),
        verdict: VerdictKind::Pass,
        annotator: "a".into(),
        timestamp: "2026-01-01T00:00:00Z".into(),
    });
    let stray = dir.path().join("stray");
    labels.save(&stray).unwrap();
    spec.audit_labels = Some(stray.join(LABELS_JSON));
    assert!(matches!(emit_report(&spec, &dir.path().join("bad")), Err(RunError::Integrity(_))));
}

#[test]
fn self_comparison_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_pipeline(dir.path(), &small_options(), 120, ExecMode::Parallel);
    let runs = p
        .evals
        .iter()
        .map(|(m, _, cal)| ReportRun {
            method: m.clone(),
            eval_dir: cal.clone(),
            uncalibrated_eval_dir: Some(cal.clone()),
        })
        .collect();
    let spec = ReportSpec { prompts: p.summary.prompts_file.clone(), k: 4, runs, audit_labels: None };
    let out = dir.path().join("self");
    emit_report(&spec, &out).unwrap();
    let deltas = &tables(&out)["calibration_deltas.csv"];
    let mut lines = deltas.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("delta"), "{header}");
    let mut rows = 0;
    for row in lines {
        rows += 1;
        for cell in row.split(',').skip(1) {
            assert!(cell.trim_start_matches('+').chars().all(|c| c == '0' || c == '.'), "{row}");
        }
    }
    assert_eq!(rows, p.evals.len());
}

fn strata_count(outcomes: &[spatialcheck::checker::CheckOutcome], bins: &ConfidenceBins) -> usize {
    spatialcheck::audit::sampling::strata(outcomes, bins).len()
}

fn fixture_prompts(pairs: usize) -> PromptSet {
    let pairs: Vec<ObjectPair> = (0..pairs).map(|i| ObjectPair::new(format!("a{i}"), format!("b{i}"))).collect();
    build_prompts(&pairs, &Template::default(), "fixture").unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_sample_is_exact(seed in any::<u64>(), pairs in 1usize..6, k in 1usize..4, frac in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let mut outcomes = random_run(&mut r, pairs, k);
        for (i, o) in outcomes.iter_mut().enumerate() {
            o.method = ["x", "y"][i % 2].into();
            o.sample_id = format!("{}__{}__s{}", o.method, o.prompt_id, o.seed);
        }
        let prompts = fixture_prompts(pairs);
        let bins = ConfidenceBins::default();
        let strata = strata_count(&outcomes, &bins);
        let n = strata + ((outcomes.len() - strata) as f64 * frac) as usize;
        let s = stratified_sample(&outcomes, &prompts, n, &bins, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        let ids: BTreeSet<&str> = s.iter().map(|x| x.sample_id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        let covered: BTreeSet<(String, String, VerdictKind, String)> =
            s.iter().map(|x| (x.method.clone(), x.relation.to_string(), x.verdict, x.confidence_bin.clone())).collect();
        prop_assert_eq!(covered.len(), strata);
        let again = stratified_sample(&outcomes, &prompts, n, &bins, seed).unwrap();
        prop_assert_eq!(s, again);
        if strata > 1 {
            let short = stratified_sample(&outcomes, &prompts, strata - 1, &bins, seed);
            prop_assert!(matches!(short, Err(AuditError::Infeasible(_))));
        }
    }
}

#[test]
fn scenes_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate(dir.path(), &small_options()).unwrap();
    let loaded = scenes(&s);
    let text = serde_json::to_string(&*loaded).unwrap();
    assert_eq!(MockScenes::from_json(&text).unwrap(), *loaded);
}
