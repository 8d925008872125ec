//! Report bundle: CSV tables, SVG charts, `report_meta.json` and the
//! effective report config. Every table cell is recomputed from the eval
//! directories' `per_sample.jsonl`.

pub mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::{risk_coverage_curve, Audited, LabelStore, RiskCoveragePoint};
use crate::checker::{CheckOutcome, Reason};
use crate::digest::hash_file;
use crate::metrics::{format_delta, format_delta_pp, format_fixed, format_ratio_percent};
use crate::prompts::{load_prompts, PromptSet};
use crate::provenance::{timestamp, TOOL_NAME, TOOL_VERSION};
use crate::relation::Relation;
use crate::run::{compute_metrics, EvalDir, RunError, RunMetrics, COUNTERFACTUAL_REDUCTION, PER_SAMPLE_FILE};
use svg::{color, Canvas};

pub const TABLES_DIR: &str = "tables";
pub const ASSETS_DIR: &str = "assets";
pub const META_FILE: &str = "report_meta.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "report_config_effective.yaml";

/// One method's calibrated eval and, optionally, its uncalibrated baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRun {
    pub method: String,
    pub eval_dir: PathBuf,
    #[serde(default)]
    pub uncalibrated_eval_dir: Option<PathBuf>,
}

/// Everything needed to regenerate a report. Written out as
/// `report_config_effective.yaml` (JSON, which is also YAML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSpec {
    pub prompts: PathBuf,
    pub k: usize,
    pub runs: Vec<ReportRun>,
    #[serde(default)]
    pub audit_labels: Option<PathBuf>,
}

impl ReportSpec {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|source| RunError::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInput {
    pub method: String,
    pub eval_dir: String,
    pub config_digest: String,
    pub per_sample_digest: String,
    pub uncalibrated_config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool: String,
    pub tool_version: String,
    pub created_at: String,
    pub k: usize,
    pub prompts_digest: String,
    pub inputs: Vec<ReportInput>,
    pub tables: Vec<String>,
    pub charts: Vec<String>,
    pub calibration_tau: Option<f64>,
    pub audit_labels_digest: Option<String>,
    pub counterfactual_reduction: String,
    pub percent_rounding: String,
}

struct MethodData {
    method: String,
    eval: EvalDir,
    metrics: RunMetrics,
    baseline: Option<(EvalDir, RunMetrics)>,
}

fn ratio_fixed(r: num_rational::Ratio<u64>, decimals: u32) -> String {
    format_fixed(i128::from(*r.numer()), i128::from(*r.denom()), decimals, false)
}

fn pct(r: num_rational::Ratio<u64>) -> String {
    format_ratio_percent(r, 1)
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String, RunError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let err = |e: csv::Error| RunError::Integrity(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Integrity(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

const BY_RELATION_ORDER: [Relation; 4] = [Relation::Above, Relation::Below, Relation::LeftOf, Relation::RightOf];

/// The report tables as `(file name, csv text)`.
fn tables(data: &[MethodData]) -> Result<Vec<(String, String)>, RunError> {
    let mut out = Vec::new();

    let rows: Vec<Vec<String>> = data
        .iter()
        .map(|d| {
            let m = &d.metrics.per_image;
            vec![
                d.method.clone(),
                m.n.to_string(),
                pct(m.pass_rate_exact()),
                pct(num_rational::Ratio::new(m.n_fail, m.n)),
                pct(m.undecidable_exact()),
                pct(m.coverage_exact()),
                m.pass_rate_cond_exact().map(pct).unwrap_or_default(),
                ratio_fixed(m.mean_confidence_exact(), 3),
            ]
        })
        .collect();
    out.push((
        "main_results.csv".into(),
        csv_text(
            &[
                "method",
                "images",
                "pass_pct",
                "fail_pct",
                "undecidable_pct",
                "coverage_pct",
                "pass_given_decided_pct",
                "mean_confidence",
            ],
            &rows,
        )?,
    ));

    let mut rows = Vec::new();
    for d in data {
        let p = d.metrics.prompt_level.as_ref().ok_or_else(|| {
            RunError::Integrity(format!("{}: no prompt has all {} seeds evaluated", d.method, d.metrics.k))
        })?;
        rows.push(vec![
            d.method.clone(),
            p.prompts.to_string(),
            p.k.to_string(),
            pct(p.best_of_k_exact()),
            pct(p.all_of_k_exact()),
        ]);
    }
    out.push((
        "prompt_metrics.csv".into(),
        csv_text(&["method", "prompts", "k", "best_of_k_pct", "all_of_k_pct"], &rows)?,
    ));

    let rows: Vec<Vec<String>> = data
        .iter()
        .map(|d| {
            let mut row = vec![d.method.clone()];
            for rel in BY_RELATION_ORDER {
                row.push(d.metrics.by_relation.get(&rel).map(|m| pct(m.pass_rate_exact())).unwrap_or_default());
            }
            row
        })
        .collect();
    out.push((
        "by_relation.csv".into(),
        csv_text(&["method", "above_pct", "below_pct", "left_of_pct", "right_of_pct"], &rows)?,
    ));

    let mut rows = Vec::new();
    for d in data {
        let c = d
            .metrics
            .counterfactual
            .as_ref()
            .ok_or_else(|| RunError::Integrity(format!("{}: no complete counterfactual pair", d.method)))?;
        rows.push(vec![
            d.method.clone(),
            c.pairs.to_string(),
            pct(c.both_pass_exact()),
            pct(c.undecidable_exact()),
            pct(c.one_sided_exact()),
            c.both_fail.to_string(),
        ]);
    }
    out.push((
        "counterfactual.csv".into(),
        csv_text(&["method", "pairs", "both_pass_pct", "undecidable_pct", "one_sided_pct", "both_fail_pairs"], &rows)?,
    ));

    let rows: Vec<Vec<String>> = data
        .iter()
        .map(|d| {
            let a = &d.metrics.abstention;
            let mut row = vec![d.method.clone(), format_ratio_percent(d.metrics.per_image.undecidable_exact(), 2)];
            row.extend(Reason::ALL.iter().map(|r| format_ratio_percent(a.share_exact(*r), 2)));
            row
        })
        .collect();
    out.push((
        "abstention_breakdown.csv".into(),
        csv_text(
            &[
                "method",
                "undecidable_pct",
                "missing_pct",
                "ambiguous_pct",
                "high_overlap_pct",
                "near_boundary_pct",
                "unstable_pct",
            ],
            &rows,
        )?,
    ));

    if data.iter().any(|d| d.baseline.is_some()) {
        let mut rows = Vec::new();
        for d in data {
            let Some((_, base)) = &d.baseline else {
                return Err(RunError::Integrity(format!(
                    "{}: calibration deltas need an uncalibrated eval for every method",
                    d.method
                )));
            };
            let (c, u) = (&d.metrics.per_image, &base.per_image);
            let cond = match (c.pass_rate_cond_exact(), u.pass_rate_cond_exact()) {
                (Some(a), Some(b)) => format_delta_pp(a, b, 2),
                _ => String::new(),
            };
            let prompt = match (&d.metrics.prompt_level, &base.prompt_level) {
                (Some(a), Some(b)) => format_delta_pp(a.best_of_k_exact(), b.best_of_k_exact(), 2),
                _ => String::new(),
            };
            rows.push(vec![
                d.method.clone(),
                format_delta_pp(c.pass_rate_exact(), u.pass_rate_exact(), 2),
                format_delta_pp(c.coverage_exact(), u.coverage_exact(), 2),
                cond,
                prompt,
                format_delta(c.mean_confidence_exact(), u.mean_confidence_exact(), 3),
            ]);
        }
        out.push((
            "calibration_deltas.csv".into(),
            csv_text(
                &[
                    "method",
                    "delta_pass_pp",
                    "delta_coverage_pp",
                    "delta_pass_given_decided_pp",
                    "delta_prompt_pass_pp",
                    "delta_mean_confidence",
                ],
                &rows,
            )?,
        ));
    }
    Ok(out)
}

fn risk_coverage_chart(curve: Option<&[RiskCoveragePoint]>, tau: Option<f64>) -> String {
    let mut c = Canvas::new("Risk-coverage (audited subset)", "coverage", "risk", 1.0, 1.0);
    match curve {
        None => c.text(0.5, 0.5, "no audit labels supplied", "middle"),
        Some(points) => {
            // Step function from high τ (low coverage) to τ = 0.
            let mut pts = Vec::new();
            let mut prev: Option<(f64, f64)> = None;
            for p in points.iter().rev() {
                let Some(r) = p.risk else { continue };
                if let Some((_, pr)) = prev {
                    pts.push((p.coverage, pr));
                }
                pts.push((p.coverage, r));
                prev = Some((p.coverage, r));
            }
            if !pts.is_empty() {
                c.polyline(&pts, color(0));
            }
            if let Some(t) = tau {
                if let Some(p) = points.iter().rfind(|p| p.tau <= t) {
                    if let Some(r) = p.risk {
                        c.circle(p.coverage, r, color(1));
                        c.text(p.coverage, r, &format!("  tau={t}"), "start");
                    }
                }
            }
        }
    }
    c.finish()
}

fn coverage_vs_cond_chart(data: &[MethodData]) -> String {
    let mut c = Canvas::new("Coverage vs conditional PASS", "coverage", "PASS | decided", 1.0, 1.0);
    let mut legend = Vec::new();
    for (i, d) in data.iter().enumerate() {
        let m = &d.metrics.per_image;
        if let Some(cond) = m.pass_rate_cond {
            c.circle(m.coverage, cond, color(i));
        }
        legend.push((d.method.clone(), color(i)));
    }
    c.legend(&legend);
    c.finish()
}

fn pass_rate_chart(data: &[MethodData]) -> String {
    let n = data.len().max(1) as f64;
    let mut c = Canvas::new("PASS rate by method", "method", "PASS rate", n, 1.0);
    for (i, d) in data.iter().enumerate() {
        let x = i as f64;
        c.bar(x + 0.2, x + 0.8, d.metrics.per_image.pass_rate, color(i));
        c.text(x + 0.5, d.metrics.per_image.pass_rate + 0.02, &d.method, "middle");
    }
    c.finish()
}

fn confidence_hist_chart(data: &[MethodData]) -> String {
    const BINS: usize = 10;
    let hist: Vec<[u64; BINS]> = data
        .iter()
        .map(|d| {
            let mut h = [0u64; BINS];
            for o in &d.eval.outcomes {
                h[((o.confidence * BINS as f64) as usize).min(BINS - 1)] += 1;
            }
            h
        })
        .collect();
    let y_max = hist
        .iter()
        .zip(data)
        .flat_map(|(h, d)| h.iter().map(move |c| *c as f64 / d.eval.outcomes.len().max(1) as f64))
        .fold(0.0f64, f64::max)
        .max(0.01);
    let mut c = Canvas::new("Confidence distribution", "overall confidence", "fraction of images", 1.0, y_max);
    let width = 1.0 / BINS as f64 / data.len().max(1) as f64;
    let mut legend = Vec::new();
    for (i, (h, d)) in hist.iter().zip(data).enumerate() {
        let total = d.eval.outcomes.len().max(1) as f64;
        for (b, count) in h.iter().enumerate() {
            let x0 = b as f64 / BINS as f64 + i as f64 * width;
            c.bar(x0, x0 + width, *count as f64 / total, color(i));
        }
        legend.push((d.method.clone(), color(i)));
    }
    c.legend(&legend);
    c.finish()
}

/// Join human labels with checker outcomes by sample id. Labels for methods
/// absent from `outcomes` are skipped.
pub fn audited_pairs(outcomes: &[&CheckOutcome], labels: &LabelStore) -> Result<Vec<Audited>, RunError> {
    let verdicts = labels.verdicts().map_err(|e| RunError::Integrity(e.to_string()))?;
    let by_id: BTreeMap<&str, &CheckOutcome> = outcomes.iter().map(|o| (o.sample_id.as_str(), *o)).collect();
    let methods: BTreeSet<&str> = outcomes.iter().map(|o| o.method.as_str()).collect();
    verdicts
        .iter()
        .filter(|(id, _)| id.split_once("__").is_none_or(|(m, _)| methods.contains(m)))
        .map(|(id, human)| {
            let o = by_id
                .get(id.as_str())
                .ok_or_else(|| RunError::Integrity(format!("label for unknown sample `{id}`")))?;
            Ok(Audited { checker: o.verdict, confidence: o.confidence, human: *human })
        })
        .collect()
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|source| RunError::Io { path: path.to_path_buf(), source })
}

fn load_method(run: &ReportRun, prompts: &PromptSet, k: usize) -> Result<MethodData, RunError> {
    let eval = EvalDir::load(&run.eval_dir)?;
    let metrics = compute_metrics(&eval.provenance.run_id, &run.method, &eval.outcomes, prompts, k)?;
    if eval.outcomes.iter().any(|o| o.method != run.method) {
        return Err(RunError::Integrity(format!(
            "{} holds outcomes for a method other than `{}`",
            run.eval_dir.display(),
            run.method
        )));
    }
    let baseline = match &run.uncalibrated_eval_dir {
        None => None,
        Some(dir) => {
            let b = EvalDir::load(dir)?;
            let m = compute_metrics(&b.provenance.run_id, &run.method, &b.outcomes, prompts, k)?;
            Some((b, m))
        }
    };
    Ok(MethodData { method: run.method.clone(), eval, metrics, baseline })
}

/// Write the report bundle into `out_dir`.
pub fn emit_report(spec: &ReportSpec, out_dir: &Path) -> Result<ReportMeta, RunError> {
    if spec.runs.is_empty() {
        return Err(RunError::Integrity("report needs at least one run".into()));
    }
    let (prompts, _) = load_prompts(&spec.prompts).map_err(|e| RunError::Integrity(e.to_string()))?;
    let data = spec.runs.iter().map(|r| load_method(r, &prompts, spec.k)).collect::<Result<Vec<_>, _>>()?;

    let tables_dir = out_dir.join(TABLES_DIR);
    let assets_dir = out_dir.join(ASSETS_DIR);
    for d in [&tables_dir, &assets_dir] {
        fs::create_dir_all(d).map_err(|source| RunError::Io { path: d.clone(), source })?;
    }
    let mut table_names = Vec::new();
    for (name, text) in tables(&data)? {
        write(&tables_dir.join(&name), &text)?;
        table_names.push(format!("{TABLES_DIR}/{name}"));
    }

    let tau = data.iter().find_map(|d| d.eval.provenance.calibration.as_ref().map(|c| c.tau));
    let (curve, labels_digest) = match &spec.audit_labels {
        None => (None, None),
        Some(path) => {
            let labels = LabelStore::load(path).map_err(|e| RunError::Integrity(e.to_string()))?;
            let all: Vec<&CheckOutcome> = data.iter().flat_map(|d| d.eval.outcomes.iter()).collect();
            let pairs = audited_pairs(&all, &labels)?;
            let digest = hash_file(path).map_err(|source| RunError::Io { path: path.clone(), source })?;
            (Some(risk_coverage_curve(&pairs)), Some(digest))
        }
    };
    let charts = [
        ("risk_coverage.svg", risk_coverage_chart(curve.as_deref(), tau)),
        ("coverage_vs_cond.svg", coverage_vs_cond_chart(&data)),
        ("pass_rate.svg", pass_rate_chart(&data)),
        ("confidence_hist.svg", confidence_hist_chart(&data)),
    ];
    let mut chart_names = Vec::new();
    for (name, text) in charts {
        write(&assets_dir.join(name), &text)?;
        chart_names.push(format!("{ASSETS_DIR}/{name}"));
    }

    let inputs = data
        .iter()
        .map(|d| {
            let per_sample = d.eval.path.join(PER_SAMPLE_FILE);
            Ok(ReportInput {
                method: d.method.clone(),
                eval_dir: d.eval.path.display().to_string(),
                config_digest: d.eval.config_digest.clone(),
                per_sample_digest: hash_file(&per_sample)
                    .map_err(|source| RunError::Io { path: per_sample.clone(), source })?,
                uncalibrated_config_digest: d.baseline.as_ref().map(|(b, _)| b.config_digest.clone()),
            })
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let meta = ReportMeta {
        tool: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        created_at: timestamp(),
        k: spec.k,
        prompts_digest: hash_file(&spec.prompts)
            .map_err(|source| RunError::Io { path: spec.prompts.clone(), source })?,
        inputs,
        tables: table_names,
        charts: chart_names,
        calibration_tau: tau,
        audit_labels_digest: labels_digest,
        counterfactual_reduction: COUNTERFACTUAL_REDUCTION.into(),
        percent_rounding: "exact counts, round half to even".into(),
    };
    crate::run::write_json_pretty(&out_dir.join(META_FILE), &meta)?;
    crate::run::write_json_pretty(&out_dir.join(EFFECTIVE_CONFIG_FILE), spec)?;
    Ok(meta)
}
