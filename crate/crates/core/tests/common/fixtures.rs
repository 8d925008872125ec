//! Synthetic outcomes for metric and audit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spatialcheck::checker::{Boxes, CheckOutcome, Reason, SecondaryVerdict, Verdict, VerdictKind};
use spatialcheck::relation::Relation;

pub fn outcome(prompt_id: &str, method: &str, seed: u64, verdict: Verdict, confidence: f64) -> CheckOutcome {
    let relation: Relation = prompt_id.split_once('_').and_then(|(_, r)| r.parse().ok()).unwrap_or(Relation::LeftOf);
    let confidence = if verdict.reason().is_some_and(Reason::zeroes_confidence) { 0.0 } else { confidence };
    CheckOutcome {
        sample_id: format!("{method}__{prompt_id}__s{seed}"),
        prompt_id: prompt_id.to_string(),
        method: method.to_string(),
        seed,
        image: format!("images/{prompt_id}_s{seed}.png"),
        relation,
        verdict: verdict.kind(),
        reason: verdict.reason(),
        delta: None,
        conf_det: 0.0,
        conf_geom: 0.0,
        conf_stab: 0.0,
        conf_agree: 0.0,
        confidence,
        boxes: Boxes::default(),
        perturbation_verdicts: Vec::new(),
        secondary_verdict: SecondaryVerdict::NotRun,
        secondary_error: None,
        config_digest: "fixture".into(),
    }
}

pub fn random_verdict(rng: &mut ChaCha8Rng) -> Verdict {
    match rng.random_range(0..7) {
        0 | 1 => Verdict::Pass,
        2 => Verdict::Fail,
        i => Verdict::Undecidable(Reason::ALL[(i as usize + rng.random_range(0..5)) % 5]),
    }
}

pub fn random_kind(rng: &mut ChaCha8Rng) -> VerdictKind {
    match rng.random_range(0..3) {
        0 => VerdictKind::Pass,
        1 => VerdictKind::Fail,
        _ => VerdictKind::Undecidable,
    }
}

/// Outcomes for `pairs` counterfactual pairs (four prompts each) × `k` seeds,
/// with an arbitrary verdict mix.
pub fn random_run(rng: &mut ChaCha8Rng, pairs: usize, k: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let pass_bias = rng.random_range(0.0..1.0);
    for i in 0..pairs {
        for rel in Relation::ALL {
            let pid = format!("{i:03}_{rel}");
            for s in 0..k as u64 {
                let v = if rng.random_bool(pass_bias) { Verdict::Pass } else { random_verdict(rng) };
                let c = (rng.random_range(0..=1_000_000) as f64) / 1e6;
                out.push(outcome(&pid, "m", s, v, c));
            }
        }
    }
    out
}
