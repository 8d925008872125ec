//! Checker parameters and their canonical flat `key: value` file form.
//!
//! Values are written as JSON scalars / flow sequences, which keeps the file
//! valid YAML while letting the digest be computed over one canonical text.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::Perturbation;
use crate::digest::sha256_hex;

pub const NEAR_BOUNDARY_RULE: &str = "abs_delta_le_margin";
pub const OVERLAP_RULE: &str = "iou_gt_threshold";
pub const UNSTABLE_RULE: &str = "stability_lt_threshold";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weights of the det / geom / stab / agree confidence components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub det: f64,
    pub geom: f64,
    pub stab: f64,
    pub agree: f64,
}

impl Weights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.det, self.geom, self.stab, self.agree]
    }
}

impl Default for Weights {
    fn default() -> Self {
        Self { det: 0.4, geom: 0.3, stab: 0.2, agree: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckerConfig {
    /// Checker-side score threshold `t_det`; the effective cutoff is
    /// `max(t_det, backend floor)`.
    pub detection_score: f64,
    pub min_area_fraction: f64,
    pub ambiguity_delta: f64,
    pub max_overlap_iou: f64,
    pub margin: f64,
    pub consistency_threshold: f64,
    pub geom_slope: f64,
    pub weights: Weights,
    pub epsilon: f64,
    pub perturbations: Vec<Perturbation>,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        Self {
            detection_score: 0.2,
            min_area_fraction: 0.005,
            ambiguity_delta: 0.1,
            max_overlap_iou: 0.5,
            margin: 0.1,
            consistency_threshold: 0.5,
            geom_slope: 0.15,
            weights: Weights::default(),
            epsilon: 1e-6,
            perturbations: Perturbation::standard_set(),
        }
    }
}

const KEYS: [&str; 13] = [
    "detection_score",
    "min_area_fraction",
    "ambiguity_delta",
    "max_overlap_iou",
    "margin",
    "consistency_threshold",
    "geom_slope",
    "weights",
    "epsilon",
    "perturbations",
    "near_boundary_rule",
    "overlap_rule",
    "unstable_rule",
];

impl CheckerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = [
            ("detection_score", self.detection_score),
            ("min_area_fraction", self.min_area_fraction),
            ("max_overlap_iou", self.max_overlap_iou),
            ("consistency_threshold", self.consistency_threshold),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} = {v} outside [0,1]")));
            }
        }
        if !(self.ambiguity_delta >= 0.0 && self.ambiguity_delta.is_finite()) {
            return Err(ConfigError::Invalid(format!("ambiguity_delta = {}", self.ambiguity_delta)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(ConfigError::Invalid(format!("margin = {}", self.margin)));
        }
        if !(self.geom_slope > 0.0 && self.geom_slope.is_finite()) {
            return Err(ConfigError::Invalid(format!("geom_slope = {} must be positive", self.geom_slope)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ConfigError::Invalid(format!("epsilon = {} must be positive", self.epsilon)));
        }
        let w = self.weights.as_array();
        if w.iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(ConfigError::Invalid("weights must be nonnegative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Canonical file text; the config digest is taken over these bytes.
    pub fn to_canonical_text(&self) -> String {
        let num = |v: f64| serde_json::to_string(&v).expect("finite");
        let mut out = String::from("# spatial relation checker config\n");
        let w = self.weights.as_array().map(num).join(", ");
        let perts = self.perturbations.iter().map(|p| format!("\"{}\"", p.key())).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "detection_score: {}", num(self.detection_score));
        let _ = writeln!(out, "min_area_fraction: {}", num(self.min_area_fraction));
        let _ = writeln!(out, "ambiguity_delta: {}", num(self.ambiguity_delta));
        let _ = writeln!(out, "max_overlap_iou: {}", num(self.max_overlap_iou));
        let _ = writeln!(out, "margin: {}", num(self.margin));
        let _ = writeln!(out, "consistency_threshold: {}", num(self.consistency_threshold));
        let _ = writeln!(out, "geom_slope: {}", num(self.geom_slope));
        let _ = writeln!(out, "weights: [{w}]");
        let _ = writeln!(out, "epsilon: {}", num(self.epsilon));
        let _ = writeln!(out, "perturbations: [{perts}]");
        let _ = writeln!(out, "near_boundary_rule: {NEAR_BOUNDARY_RULE}");
        let _ = writeln!(out, "overlap_rule: {OVERLAP_RULE}");
        let _ = writeln!(out, "unstable_rule: {UNSTABLE_RULE}");
        out
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical_text().as_bytes())
    }

    /// Parse a flat `key: value` file. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = CheckerConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| ConfigError::Parse { line: i + 1, msg };
            let (key, value) =
                line.split_once(':').ok_or_else(|| perr(format!("expected `key: value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(perr(format!("unknown key `{key}`")));
            }
            let float = |v: &str| -> Result<f64, ConfigError> {
                v.parse::<f64>().map_err(|_| perr(format!("`{key}` expects a number, got `{v}`")))
            };
            match key {
                "detection_score" => cfg.detection_score = float(value)?,
                "min_area_fraction" => cfg.min_area_fraction = float(value)?,
                "ambiguity_delta" => cfg.ambiguity_delta = float(value)?,
                "max_overlap_iou" => cfg.max_overlap_iou = float(value)?,
                "margin" => cfg.margin = float(value)?,
                "consistency_threshold" => cfg.consistency_threshold = float(value)?,
                "geom_slope" => cfg.geom_slope = float(value)?,
                "epsilon" => cfg.epsilon = float(value)?,
                "weights" => {
                    let w: Vec<f64> = serde_json::from_str(value).map_err(|e| perr(format!("weights: {e}")))?;
                    let [det, geom, stab, agree] =
                        <[f64; 4]>::try_from(w).map_err(|_| perr("weights needs exactly four values".into()))?;
                    cfg.weights = Weights { det, geom, stab, agree };
                }
                "perturbations" => {
                    let keys: Vec<String> =
                        serde_json::from_str(value).map_err(|e| perr(format!("perturbations: {e}")))?;
                    cfg.perturbations = keys
                        .iter()
                        .map(|k| k.parse::<Perturbation>().map_err(|e| perr(e.to_string())))
                        .collect::<Result<_, _>>()?;
                }
                rule => {
                    let expected = match rule {
                        "near_boundary_rule" => NEAR_BOUNDARY_RULE,
                        "overlap_rule" => OVERLAP_RULE,
                        _ => UNSTABLE_RULE,
                    };
                    if value != expected {
                        return Err(perr(format!("{rule} `{value}` unsupported (only `{expected}`)")));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Copy with a different margin and detection threshold (calibration grid).
    pub fn with_margin_and_threshold(&self, margin: f64, detection_score: f64) -> Self {
        Self { margin, detection_score, ..self.clone() }
    }
}
