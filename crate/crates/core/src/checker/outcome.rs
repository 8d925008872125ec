//! Verdicts and the per-sample outcome record written to `per_sample.jsonl`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detection::{BoundingBox, Detection};
use crate::relation::Relation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Missing,
    Ambiguous,
    HighOverlap,
    NearBoundary,
    Unstable,
}

impl Reason {
    pub const ALL: [Reason; 5] =
        [Reason::Missing, Reason::Ambiguous, Reason::HighOverlap, Reason::NearBoundary, Reason::Unstable];

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Missing => "missing",
            Reason::Ambiguous => "ambiguous",
            Reason::HighOverlap => "high_overlap",
            Reason::NearBoundary => "near_boundary",
            Reason::Unstable => "unstable",
        }
    }

    /// Abstentions that force overall confidence to zero.
    pub fn zeroes_confidence(self) -> bool {
        matches!(self, Reason::Missing | Reason::Ambiguous)
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Reason::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown abstention reason `{s}`"))
    }
}

/// The three-way verdict label without its reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictKind {
    Pass,
    Fail,
    Undecidable,
}

impl VerdictKind {
    pub const ALL: [VerdictKind; 3] = [VerdictKind::Pass, VerdictKind::Fail, VerdictKind::Undecidable];

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Pass => "PASS",
            VerdictKind::Fail => "FAIL",
            VerdictKind::Undecidable => "UNDECIDABLE",
        }
    }
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerdictKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VerdictKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown verdict `{s}`"))
    }
}

/// Serialized as `PASS`, `FAIL` or `UNDECIDABLE:<reason>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Verdict {
    Pass,
    Fail,
    Undecidable(Reason),
}

impl Verdict {
    pub fn kind(self) -> VerdictKind {
        match self {
            Verdict::Pass => VerdictKind::Pass,
            Verdict::Fail => VerdictKind::Fail,
            Verdict::Undecidable(_) => VerdictKind::Undecidable,
        }
    }

    pub fn reason(self) -> Option<Reason> {
        match self {
            Verdict::Undecidable(r) => Some(r),
            _ => None,
        }
    }

    pub fn is_decided(self) -> bool {
        !matches!(self, Verdict::Undecidable(_))
    }

    pub fn from_parts(kind: VerdictKind, reason: Option<Reason>) -> Result<Self, String> {
        match (kind, reason) {
            (VerdictKind::Pass, None) => Ok(Verdict::Pass),
            (VerdictKind::Fail, None) => Ok(Verdict::Fail),
            (VerdictKind::Undecidable, Some(r)) => Ok(Verdict::Undecidable(r)),
            (k, r) => Err(format!("inconsistent verdict {k} with reason {r:?}")),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Undecidable(r) => write!(f, "UNDECIDABLE:{r}"),
            other => f.write_str(other.kind().as_str()),
        }
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("UNDECIDABLE", r)) => Ok(Verdict::Undecidable(r.parse()?)),
            Some(_) => Err(format!("malformed verdict `{s}`")),
            None => Verdict::from_parts(s.parse()?, None),
        }
    }
}

impl From<Verdict> for String {
    fn from(v: Verdict) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for Verdict {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// What the secondary detector concluded on the unperturbed image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SecondaryVerdict {
    Verdict(Verdict),
    BackendFailed,
    NotRun,
}

impl fmt::Display for SecondaryVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecondaryVerdict::Verdict(v) => v.fmt(f),
            SecondaryVerdict::BackendFailed => f.write_str("BACKEND_FAILED"),
            SecondaryVerdict::NotRun => f.write_str("NOT_RUN"),
        }
    }
}

impl From<SecondaryVerdict> for String {
    fn from(v: SecondaryVerdict) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for SecondaryVerdict {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.as_str() {
            "BACKEND_FAILED" => Ok(SecondaryVerdict::BackendFailed),
            "NOT_RUN" => Ok(SecondaryVerdict::NotRun),
            other => Ok(SecondaryVerdict::Verdict(other.parse()?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBreakdown {
    pub det: f64,
    pub geom: f64,
    pub stab: f64,
    pub agree: f64,
    pub overall: f64,
}

impl ConfidenceBreakdown {
    pub const ZERO: ConfidenceBreakdown =
        ConfidenceBreakdown { det: 0.0, geom: 0.0, stab: 0.0, agree: 0.0, overall: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedBox {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl From<&Detection> for SelectedBox {
    fn from(d: &Detection) -> Self {
        SelectedBox { label: d.label.clone(), score: d.score, bbox: d.bbox }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Boxes {
    pub a: Option<SelectedBox>,
    pub b: Option<SelectedBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationVerdict {
    pub perturbation: String,
    pub verdict: Verdict,
}

/// Which generated image a check is about.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleIdentity {
    pub prompt_id: String,
    pub method: String,
    pub seed: u64,
    pub image: String,
}

impl SampleIdentity {
    pub fn sample_id(&self) -> String {
        format!("{}__{}__s{}", self.method, self.prompt_id, self.seed)
    }
}

/// One line of `per_sample.jsonl`. Floats are quantized to 1e-6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub sample_id: String,
    pub prompt_id: String,
    pub method: String,
    pub seed: u64,
    pub image: String,
    pub relation: Relation,
    pub verdict: VerdictKind,
    pub reason: Option<Reason>,
    pub delta: Option<f64>,
    pub conf_det: f64,
    pub conf_geom: f64,
    pub conf_stab: f64,
    pub conf_agree: f64,
    pub confidence: f64,
    pub boxes: Boxes,
    pub perturbation_verdicts: Vec<PerturbationVerdict>,
    pub secondary_verdict: SecondaryVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary_error: Option<String>,
    pub config_digest: String,
}

impl CheckOutcome {
    pub fn full_verdict(&self) -> Verdict {
        Verdict::from_parts(self.verdict, self.reason).expect("outcome verdict/reason validated")
    }

    pub fn identity(&self) -> SampleIdentity {
        SampleIdentity {
            prompt_id: self.prompt_id.clone(),
            method: self.method.clone(),
            seed: self.seed,
            image: self.image.clone(),
        }
    }

    pub fn breakdown(&self) -> ConfidenceBreakdown {
        ConfidenceBreakdown {
            det: self.conf_det,
            geom: self.conf_geom,
            stab: self.conf_stab,
            agree: self.conf_agree,
            overall: self.confidence,
        }
    }

    /// Structural invariants of a stored outcome.
    pub fn validate(&self) -> Result<(), String> {
        let v = Verdict::from_parts(self.verdict, self.reason)?;
        let both = self.boxes.a.is_some() && self.boxes.b.is_some();
        if both != self.delta.is_some() {
            return Err(format!("{}: delta must be present iff both boxes are", self.sample_id));
        }
        if v.reason().is_some_and(Reason::zeroes_confidence) && self.confidence != 0.0 {
            return Err(format!("{}: {v} with nonzero confidence", self.sample_id));
        }
        for c in [self.conf_det, self.conf_geom, self.conf_stab, self.conf_agree, self.confidence] {
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("{}: confidence component {c} outside [0,1]", self.sample_id));
            }
        }
        Ok(())
    }

    /// Single JSON line with keys in sorted order.
    pub fn to_json_line(&self) -> String {
        let value = serde_json::to_value(self).expect("outcome serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, String> {
        let o: CheckOutcome = serde_json::from_str(line).map_err(|e| e.to_string())?;
        o.validate()?;
        Ok(o)
    }
}
