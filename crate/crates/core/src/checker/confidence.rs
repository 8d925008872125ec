//! Decomposed confidence: detection, geometry, stability and agreement
//! combined as a weighted geometric mean.

use super::config::{CheckerConfig, Weights};
use super::outcome::Verdict;

pub fn detection_component(score_a: f64, score_b: f64) -> f64 {
    (score_a * score_b).sqrt()
}

/// `clip((|d| - m) / γ, 0, 1)`, exactly 1 once `|d| ≥ m + γ`.
pub fn geometry_component(d: f64, margin: f64, slope: f64) -> f64 {
    let ad = d.abs();
    if ad >= margin + slope {
        1.0
    } else {
        ((ad - margin) / slope).clamp(0.0, 1.0)
    }
}

/// 1 on agreement, 0 on contradiction, neutral 0.5 when the secondary
/// abstained or was unavailable.
pub fn agreement_component(base: Verdict, secondary: Option<Verdict>) -> f64 {
    match secondary {
        Some(v) if v.is_decided() => {
            if v == base {
                1.0
            } else {
                0.0
            }
        }
        _ => 0.5,
    }
}

pub fn combine(components: [f64; 4], weights: &Weights, epsilon: f64) -> f64 {
    let log: f64 = components.iter().zip(weights.as_array()).map(|(c, w)| w * (c + epsilon).ln()).sum();
    log.exp().clamp(0.0, 1.0)
}

pub fn confidence(det: f64, geom: f64, stab: f64, agree: f64, cfg: &CheckerConfig) -> f64 {
    combine([det, geom, stab, agree], &cfg.weights, cfg.epsilon)
}
