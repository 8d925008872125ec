//! Selective-prediction analysis against human labels.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::checker::VerdictKind;

/// A checker decision paired with the human label for the same sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Audited {
    pub checker: VerdictKind,
    pub confidence: f64,
    pub human: VerdictKind,
}

fn decided(v: VerdictKind) -> bool {
    v != VerdictKind::Undecidable
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub tau: f64,
    pub n_total: u64,
    /// Checker decided with confidence ≥ τ.
    pub n_covered: u64,
    /// Covered and human decided.
    pub n_scored: u64,
    pub n_errors: u64,
    pub coverage: f64,
    pub risk: Option<f64>,
}

impl RiskCoveragePoint {
    pub fn coverage_exact(&self) -> Ratio<u64> {
        Ratio::new(self.n_covered, self.n_total.max(1))
    }

    pub fn risk_exact(&self) -> Option<Ratio<u64>> {
        (self.n_scored > 0).then(|| Ratio::new(self.n_errors, self.n_scored))
    }
}

pub fn point_at(samples: &[Audited], tau: f64) -> RiskCoveragePoint {
    let mut p = RiskCoveragePoint {
        tau,
        n_total: samples.len() as u64,
        n_covered: 0,
        n_scored: 0,
        n_errors: 0,
        coverage: 0.0,
        risk: None,
    };
    for s in samples {
        if decided(s.checker) && s.confidence >= tau {
            p.n_covered += 1;
            if decided(s.human) {
                p.n_scored += 1;
                if s.human != s.checker {
                    p.n_errors += 1;
                }
            }
        }
    }
    if p.n_total > 0 {
        p.coverage = p.n_covered as f64 / p.n_total as f64;
    }
    p.risk = (p.n_scored > 0).then(|| p.n_errors as f64 / p.n_scored as f64);
    p
}

/// Sweep τ over 0 and every distinct confidence, ascending.
pub fn risk_coverage_curve(samples: &[Audited]) -> Vec<RiskCoveragePoint> {
    let mut taus: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    taus.push(0.0);
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    // One pass per τ keeps the code obviously equal to the definition; audit
    // sets are a few hundred samples.
    taus.into_iter().map(|t| point_at(samples, t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FprCounts {
    /// Checker PASS, confidence ≥ τ, human FAIL.
    pub false_pass: u64,
    /// Checker PASS with confidence ≥ τ.
    pub predicted_pass: u64,
    /// Same, restricted to human-decided samples.
    pub predicted_pass_human_decided: u64,
}

impl FprCounts {
    /// Literal definition: the denominator counts every confident PASS.
    pub fn fpr(&self) -> Ratio<u64> {
        if self.predicted_pass == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(self.false_pass, self.predicted_pass)
        }
    }

    /// Supplementary variant excluding human-UNDECIDABLE from the denominator.
    pub fn fpr_excluding_undecidable(&self) -> Ratio<u64> {
        if self.predicted_pass_human_decided == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(self.false_pass, self.predicted_pass_human_decided)
        }
    }
}

pub fn fpr_counts(samples: &[Audited], tau: f64) -> FprCounts {
    let mut c = FprCounts { false_pass: 0, predicted_pass: 0, predicted_pass_human_decided: 0 };
    for s in samples.iter().filter(|s| s.checker == VerdictKind::Pass && s.confidence >= tau) {
        c.predicted_pass += 1;
        if decided(s.human) {
            c.predicted_pass_human_decided += 1;
        }
        if s.human == VerdictKind::Fail {
            c.false_pass += 1;
        }
    }
    c
}

pub fn fpr_pass(samples: &[Audited], tau: f64) -> f64 {
    let r = fpr_counts(samples, tau).fpr();
    *r.numer() as f64 / *r.denom() as f64
}

pub const FPR_WEIGHT: u64 = 10;
pub const RISK_WEIGHT: u64 = 2;

/// `J = 10·FPR + 2·risk + 0.5·(1 − coverage)`.
pub fn objective_j(fpr: f64, risk: f64, coverage: f64) -> f64 {
    FPR_WEIGHT as f64 * fpr + RISK_WEIGHT as f64 * risk + 0.5 * (1.0 - coverage)
}

/// Exact form of [`objective_j`]; absent risk counts as 0.
pub fn objective_j_exact(fpr: Ratio<u64>, risk: Option<Ratio<u64>>, coverage: Ratio<u64>) -> Ratio<u64> {
    let one = Ratio::from_integer(1);
    fpr * FPR_WEIGHT + risk.unwrap_or_default() * RISK_WEIGHT + (one - coverage) / 2
}
