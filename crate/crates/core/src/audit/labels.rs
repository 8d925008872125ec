//! Human audit labels: one per (sample, annotator), with an overwrite trail.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AuditError;
use crate::checker::VerdictKind;

pub const LABELS_JSON: &str = "labels_filled.json";
pub const LABELS_CSV: &str = "labels_filled.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLabel {
    pub sample_id: String,
    pub verdict: VerdictKind,
    pub annotator: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRevision {
    pub sample_id: String,
    pub annotator: String,
    pub previous: VerdictKind,
    pub previous_timestamp: String,
    pub replaced_by: VerdictKind,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubmitOutcome {
    Created,
    /// Same verdict already stored; the stored label is kept as is.
    Unchanged,
    Replaced {
        previous: VerdictKind,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelStore {
    labels: Vec<AuditLabel>,
    #[serde(default)]
    history: Vec<LabelRevision>,
}

impl LabelStore {
    pub fn labels(&self) -> &[AuditLabel] {
        &self.labels
    }

    pub fn history(&self) -> &[LabelRevision] {
        &self.history
    }

    pub fn get(&self, sample_id: &str, annotator: &str) -> Option<&AuditLabel> {
        self.labels.iter().find(|l| l.sample_id == sample_id && l.annotator == annotator)
    }

    pub fn submit(&mut self, label: AuditLabel) -> SubmitOutcome {
        match self.labels.iter_mut().find(|l| l.sample_id == label.sample_id && l.annotator == label.annotator) {
            None => {
                self.labels.push(label);
                self.labels.sort_by(|a, b| (&a.sample_id, &a.annotator).cmp(&(&b.sample_id, &b.annotator)));
                SubmitOutcome::Created
            }
            Some(existing) if existing.verdict == label.verdict => SubmitOutcome::Unchanged,
            Some(existing) => {
                let previous = existing.verdict;
                self.history.push(LabelRevision {
                    sample_id: label.sample_id.clone(),
                    annotator: label.annotator.clone(),
                    previous,
                    previous_timestamp: existing.timestamp.clone(),
                    replaced_by: label.verdict,
                    timestamp: label.timestamp.clone(),
                });
                *existing = label;
                SubmitOutcome::Replaced { previous }
            }
        }
    }

    /// Human verdict per sample. Annotators who disagree on a sample are an
    /// error; the analysis assumes one adjudicated label.
    pub fn verdicts(&self) -> Result<BTreeMap<String, VerdictKind>, AuditError> {
        let mut out: BTreeMap<String, VerdictKind> = BTreeMap::new();
        for l in &self.labels {
            match out.get(&l.sample_id) {
                Some(v) if *v != l.verdict => return Err(AuditError::ConflictingLabels(l.sample_id.clone())),
                _ => {
                    out.insert(l.sample_id.clone(), l.verdict);
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("labels serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, AuditError> {
        let mut store: LabelStore = serde_json::from_str(text)?;
        let mut seen = std::collections::BTreeSet::new();
        for l in &store.labels {
            if !seen.insert((l.sample_id.clone(), l.annotator.clone())) {
                return Err(AuditError::Invalid(format!("duplicate label for `{}` by `{}`", l.sample_id, l.annotator)));
            }
        }
        store.labels.sort_by(|a, b| (&a.sample_id, &a.annotator).cmp(&(&b.sample_id, &b.annotator)));
        Ok(store)
    }

    pub fn to_csv(&self) -> Result<String, AuditError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        for l in &self.labels {
            w.serialize(l)?;
        }
        let bytes = w.into_inner().map_err(|e| AuditError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, AuditError> {
        let mut store = LabelStore::default();
        let mut r = csv::Reader::from_reader(text.as_bytes());
        for row in r.deserialize() {
            let label: AuditLabel = row?;
            if store.submit(label) != SubmitOutcome::Created {
                return Err(AuditError::Invalid("duplicate label row in csv".into()));
            }
        }
        Ok(store)
    }

    /// Load `.json` or `.csv` by extension.
    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Self::from_csv(&text),
            _ => Self::from_json(&text),
        }
    }

    /// Write `labels_filled.json` and `labels_filled.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AuditError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(LABELS_JSON), self.to_json())?;
        std::fs::write(dir.join(LABELS_CSV), self.to_csv()?)?;
        Ok(())
    }
}
