//! Aggregation of check outcomes under abstention semantics.
//!
//! All rates are kept as exact counts; floats in the JSON output are
//! conveniences. Rendering goes through [`format_percent`], which rounds
//! half-to-even on the exact rational.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{CheckOutcome, Reason, VerdictKind};
use crate::relation::Relation;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no outcomes to aggregate")]
    Empty,
    #[error("prompt `{prompt_id}` has {found} seeds, expected {k}")]
    SeedCount { prompt_id: String, found: usize, k: usize },
    #[error("prompt `{0}` has no counterfactual partner among the outcomes")]
    UnmatchedPrompt(String),
    #[error("confidence {0} is not quantized to 1e-6 within [0,1]")]
    Confidence(f64),
}

/// Confidence in integer millionths; outcomes are quantized to 1e-6 so this
/// is exact.
pub fn confidence_micro(c: f64) -> Result<u64, MetricsError> {
    let m = (c * 1e6).round();
    if !(0.0..=1e6).contains(&m) || ((m / 1e6) - c).abs() > 1e-12 {
        return Err(MetricsError::Confidence(c));
    }
    Ok(m as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub n: u64,
    pub n_pass: u64,
    pub n_fail: u64,
    pub n_undecidable: u64,
    pub confidence_sum_micro: u64,
    pub pass_rate: f64,
    pub coverage: f64,
    pub pass_rate_cond: Option<f64>,
    pub mean_confidence: f64,
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl MethodMetrics {
    pub fn from_counts(
        n_pass: u64,
        n_fail: u64,
        n_undecidable: u64,
        confidence_sum_micro: u64,
    ) -> Result<Self, MetricsError> {
        let n = n_pass + n_fail + n_undecidable;
        if n == 0 {
            return Err(MetricsError::Empty);
        }
        let mut m = MethodMetrics {
            n,
            n_pass,
            n_fail,
            n_undecidable,
            confidence_sum_micro,
            pass_rate: 0.0,
            coverage: 0.0,
            pass_rate_cond: None,
            mean_confidence: 0.0,
        };
        m.pass_rate = to_f64(m.pass_rate_exact());
        m.coverage = to_f64(m.coverage_exact());
        m.pass_rate_cond = m.pass_rate_cond_exact().map(to_f64);
        m.mean_confidence = to_f64(m.mean_confidence_exact());
        Ok(m)
    }

    pub fn n_decided(&self) -> u64 {
        self.n_pass + self.n_fail
    }

    pub fn pass_rate_exact(&self) -> Ratio<u64> {
        Ratio::new(self.n_pass, self.n)
    }

    pub fn coverage_exact(&self) -> Ratio<u64> {
        Ratio::new(self.n_decided(), self.n)
    }

    pub fn undecidable_exact(&self) -> Ratio<u64> {
        Ratio::new(self.n_undecidable, self.n)
    }

    pub fn pass_rate_cond_exact(&self) -> Option<Ratio<u64>> {
        (self.n_decided() > 0).then(|| Ratio::new(self.n_pass, self.n_decided()))
    }

    pub fn mean_confidence_exact(&self) -> Ratio<u64> {
        Ratio::new(self.confidence_sum_micro, self.n * 1_000_000)
    }
}

pub fn per_image_metrics(outcomes: &[CheckOutcome]) -> Result<MethodMetrics, MetricsError> {
    let (mut p, mut f, mut u, mut conf) = (0, 0, 0, 0);
    for o in outcomes {
        match o.verdict {
            VerdictKind::Pass => p += 1,
            VerdictKind::Fail => f += 1,
            VerdictKind::Undecidable => u += 1,
        }
        conf += confidence_micro(o.confidence)?;
    }
    MethodMetrics::from_counts(p, f, u, conf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLevelMetrics {
    pub k: usize,
    pub prompts: u64,
    pub best_of_k: u64,
    pub all_of_k: u64,
    pub best_of_k_rate: f64,
    pub all_of_k_rate: f64,
}

impl PromptLevelMetrics {
    pub fn best_of_k_exact(&self) -> Ratio<u64> {
        Ratio::new(self.best_of_k, self.prompts)
    }

    pub fn all_of_k_exact(&self) -> Ratio<u64> {
        Ratio::new(self.all_of_k, self.prompts)
    }
}

fn group_by_prompt(outcomes: &[CheckOutcome]) -> BTreeMap<&str, Vec<VerdictKind>> {
    let mut by: BTreeMap<&str, Vec<VerdictKind>> = BTreeMap::new();
    for o in outcomes {
        by.entry(o.prompt_id.as_str()).or_default().push(o.verdict);
    }
    by
}

pub fn prompt_metrics(outcomes: &[CheckOutcome], k: usize) -> Result<PromptLevelMetrics, MetricsError> {
    let groups = group_by_prompt(outcomes);
    if groups.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut best, mut all) = (0, 0);
    for (prompt_id, verdicts) in &groups {
        if verdicts.len() != k {
            return Err(MetricsError::SeedCount { prompt_id: prompt_id.to_string(), found: verdicts.len(), k });
        }
        if verdicts.contains(&VerdictKind::Pass) {
            best += 1;
        }
        if verdicts.iter().all(|v| *v == VerdictKind::Pass) {
            all += 1;
        }
    }
    let prompts = groups.len() as u64;
    Ok(PromptLevelMetrics {
        k,
        prompts,
        best_of_k: best,
        all_of_k: all,
        best_of_k_rate: best as f64 / prompts as f64,
        all_of_k_rate: all as f64 / prompts as f64,
    })
}

/// Per-prompt reduction over seeds: PASS if any seed passes, else FAIL if
/// any fails, else UNDECIDABLE.
pub fn reduce_seeds(verdicts: &[VerdictKind]) -> VerdictKind {
    if verdicts.contains(&VerdictKind::Pass) {
        VerdictKind::Pass
    } else if verdicts.contains(&VerdictKind::Fail) {
        VerdictKind::Fail
    } else {
        VerdictKind::Undecidable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualMetrics {
    pub pairs: u64,
    pub both_pass: u64,
    pub one_sided: u64,
    /// Pairs with an undecidable side, plus pairs failing on both sides.
    pub undecidable: u64,
    /// The both-FAIL part of `undecidable`, reported for transparency.
    pub both_fail: u64,
    pub both_pass_rate: f64,
    pub one_sided_rate: f64,
    pub undecidable_mass: f64,
}

impl CounterfactualMetrics {
    pub fn both_pass_exact(&self) -> Ratio<u64> {
        Ratio::new(self.both_pass, self.pairs)
    }

    pub fn one_sided_exact(&self) -> Ratio<u64> {
        Ratio::new(self.one_sided, self.pairs)
    }

    pub fn undecidable_exact(&self) -> Ratio<u64> {
        Ratio::new(self.undecidable, self.pairs)
    }
}

/// Bucket counterfactual pairs. `pairing` maps each prompt id to its partner.
pub fn counterfactual_metrics(
    outcomes: &[CheckOutcome],
    pairing: &BTreeMap<String, String>,
) -> Result<CounterfactualMetrics, MetricsError> {
    let groups = group_by_prompt(outcomes);
    if groups.is_empty() {
        return Err(MetricsError::Empty);
    }
    let reduced: BTreeMap<&str, VerdictKind> = groups.iter().map(|(p, v)| (*p, reduce_seeds(v))).collect();
    let mut seen = BTreeSet::new();
    let (mut both_pass, mut one_sided, mut undecidable, mut both_fail) = (0, 0, 0, 0);
    for (&p, &vp) in &reduced {
        if seen.contains(p) {
            continue;
        }
        let q = pairing
            .get(p)
            .filter(|q| {
                reduced.contains_key(q.as_str())
                    && q.as_str() != p
                    && pairing.get(q.as_str()).map(String::as_str) == Some(p)
            })
            .ok_or_else(|| MetricsError::UnmatchedPrompt(p.to_string()))?;
        let vq = reduced[q.as_str()];
        seen.insert(p);
        seen.insert(q.as_str());
        use VerdictKind::*;
        match (vp, vq) {
            (Pass, Pass) => both_pass += 1,
            (Pass, Fail) | (Fail, Pass) => one_sided += 1,
            (Fail, Fail) => {
                both_fail += 1;
                undecidable += 1;
            }
            _ => undecidable += 1,
        }
    }
    let pairs = both_pass + one_sided + undecidable;
    let rate = |x: u64| x as f64 / pairs as f64;
    Ok(CounterfactualMetrics {
        pairs,
        both_pass,
        one_sided,
        undecidable,
        both_fail,
        both_pass_rate: rate(both_pass),
        one_sided_rate: rate(one_sided),
        undecidable_mass: rate(undecidable),
    })
}

/// Abstention counts per reason over all images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstentionBreakdown {
    pub n: u64,
    pub counts: BTreeMap<Reason, u64>,
}

impl AbstentionBreakdown {
    pub fn count(&self, reason: Reason) -> u64 {
        self.counts.get(&reason).copied().unwrap_or(0)
    }

    pub fn share_exact(&self, reason: Reason) -> Ratio<u64> {
        Ratio::new(self.count(reason), self.n.max(1))
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

pub fn abstention_breakdown(outcomes: &[CheckOutcome]) -> AbstentionBreakdown {
    let mut counts: BTreeMap<Reason, u64> = Reason::ALL.iter().map(|r| (*r, 0)).collect();
    for o in outcomes {
        if let Some(r) = o.reason {
            *counts.entry(r).or_default() += 1;
        }
    }
    AbstentionBreakdown { n: outcomes.len() as u64, counts }
}

/// Per-relation metrics; relations with no outcomes are absent.
pub fn by_relation_metrics(outcomes: &[CheckOutcome]) -> Result<BTreeMap<Relation, MethodMetrics>, MetricsError> {
    let mut out = BTreeMap::new();
    for rel in Relation::ALL {
        let subset: Vec<CheckOutcome> = outcomes.iter().filter(|o| o.relation == rel).cloned().collect();
        if !subset.is_empty() {
            out.insert(rel, per_image_metrics(&subset)?);
        }
    }
    Ok(out)
}

/// `num/den` rounded half-to-even at `1/scale` resolution, `den > 0`.
fn round_half_even(num: i128, den: i128) -> i128 {
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

fn render_fixed(units: i128, decimals: u32, signed: bool) -> String {
    let scale = 10i128.pow(decimals);
    let sign = if units < 0 {
        "-"
    } else if signed {
        "+"
    } else {
        ""
    };
    let a = units.abs();
    if decimals == 0 {
        format!("{sign}{a}")
    } else {
        format!("{sign}{}.{:0width$}", a / scale, a % scale, width = decimals as usize)
    }
}

/// Exact `num/den` rendered with `decimals` places, rounding half to even.
pub fn format_fixed(num: i128, den: i128, decimals: u32, signed: bool) -> String {
    assert!(den != 0, "zero denominator");
    let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
    render_fixed(round_half_even(num * 10i128.pow(decimals), den), decimals, signed)
}

/// `num/den` as a percentage with `decimals` places (e.g. 413/800 → "51.6").
pub fn format_percent(num: u64, den: u64, decimals: u32) -> String {
    format_fixed(i128::from(num) * 100, i128::from(den), decimals, false)
}

pub fn format_ratio_percent(r: Ratio<u64>, decimals: u32) -> String {
    format_percent(*r.numer(), *r.denom(), decimals)
}

/// Signed difference `a - b` in percentage points (e.g. "-2.75", "+0.00").
pub fn format_delta_pp(a: Ratio<u64>, b: Ratio<u64>, decimals: u32) -> String {
    let d = to_signed(a) - to_signed(b);
    format_fixed(d.numer() * 100, *d.denom(), decimals, true)
}

/// Signed difference of plain fractions (e.g. mean confidence "-0.040").
pub fn format_delta(a: Ratio<u64>, b: Ratio<u64>, decimals: u32) -> String {
    let d = to_signed(a) - to_signed(b);
    format_fixed(*d.numer(), *d.denom(), decimals, true)
}

fn to_signed(r: Ratio<u64>) -> Ratio<i128> {
    Ratio::new(i128::from(*r.numer()), i128::from(*r.denom()))
}
