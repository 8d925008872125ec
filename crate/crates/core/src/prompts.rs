//! Versioned prompt benchmark: object pairs expanded into four relations and
//! linked into counterfactual (role-swapped) pairs.
//!
//! For an unordered pair `(A, B)` at index `i` the build emits, in order:
//!
//! | prompt_id       | reads          | counterfactual  |
//! |-----------------|----------------|-----------------|
//! | `{i}_left_of`   | A left_of B    | `{i}_right_of`  |
//! | `{i}_right_of`  | B right_of A   | `{i}_left_of`   |
//! | `{i}_above`     | A above B      | `{i}_below`     |
//! | `{i}_below`     | B below A      | `{i}_above`     |
//!
//! The canonical `prompts.jsonl` has one record per line with keys in a fixed
//! order and LF endings, so identical inputs hash identically.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{checksum_line, sha256_hex};
use crate::relation::{Axis, Relation};

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const META_FILE: &str = "dataset_meta.json";
pub const CHECKSUM_FILE: &str = "sha256.txt";

const DEFAULT_PAIRS: &str = include_str!("../data/default_pairs.txt");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("pair {index} duplicates pair {first} ({a}, {b})")]
    DuplicatePair { index: usize, first: usize, a: String, b: String },
    #[error("pair {index} uses the same label `{label}` twice")]
    IdenticalLabels { index: usize, label: String },
    #[error("pair {index} has an empty label")]
    EmptyLabel { index: usize },
    #[error("pairs file line {line}: {msg}")]
    MalformedPairs { line: usize, msg: String },
    #[error("template is missing the `{0}` slot")]
    TemplateSlot(&'static str),
    #[error("prompt `{id}` links to unknown counterfactual `{target}`")]
    DanglingCounterfactual { id: String, target: String },
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("{path} line {line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An unordered pair of distinct object labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectPair {
    pub a: String,
    pub b: String,
}

impl ObjectPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        Self { a: a.into(), b: b.into() }
    }

    fn unordered_key(&self) -> (&str, &str) {
        if self.a <= self.b {
            (&self.a, &self.b)
        } else {
            (&self.b, &self.a)
        }
    }
}

/// Parse a pairs file: one `a,b` pair per line, `#` comments and blank lines ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<ObjectPair>, DatasetError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(DatasetError::MalformedPairs { line: i + 1, msg: format!("expected `a,b`, got `{line}`") });
        }
        pairs.push(ObjectPair::new(fields[0], fields[1]));
    }
    Ok(pairs)
}

/// The shipped list of 50 pairs.
pub fn default_pairs() -> Vec<ObjectPair> {
    parse_pairs(DEFAULT_PAIRS).expect("bundled pairs file is well formed")
}

/// Sentence template with `{a}`, `{rel}` and `{b}` slots plus the phrase used
/// for each relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub pattern: String,
    pub phrases: BTreeMap<Relation, String>,
}

impl Default for Template {
    fn default() -> Self {
        let phrases = BTreeMap::from([
            (Relation::LeftOf, "to the left of".to_string()),
            (Relation::RightOf, "to the right of".to_string()),
            (Relation::Above, "above".to_string()),
            (Relation::Below, "below".to_string()),
        ]);
        Self { pattern: "A photo of a {a} {rel} a {b}.".to_string(), phrases }
    }
}

impl Template {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for slot in ["{a}", "{rel}", "{b}"] {
            if !self.pattern.contains(slot) {
                return Err(DatasetError::TemplateSlot(slot));
            }
        }
        for r in Relation::ALL {
            if !self.phrases.contains_key(&r) {
                return Err(DatasetError::TemplateSlot(r.as_str()));
            }
        }
        Ok(())
    }

    pub fn render(&self, a: &str, relation: Relation, b: &str) -> String {
        let phrase = self.phrases.get(&relation).map(String::as_str).unwrap_or(relation.as_str());
        self.pattern.replace("{a}", a).replace("{rel}", phrase).replace("{b}", b)
    }
}

/// One benchmark prompt. Field order is the canonical key order on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub object_a: String,
    pub object_b: String,
    pub relation: Relation,
    pub text: String,
    pub pair_id: String,
    pub counterfactual_id: String,
    pub axis_group: Axis,
}

/// Counts and content digest describing a built prompt set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: String,
    pub total_prompts: usize,
    pub object_pairs: usize,
    pub counterfactual_pairs: usize,
    pub prompts_per_relation: usize,
    pub unique_objects: usize,
    pub content_digest: String,
    pub template: Template,
}

/// Immutable prompt collection with id lookup.
#[derive(Debug, Clone)]
pub struct PromptSet {
    records: Vec<PromptRecord>,
    index: HashMap<String, usize>,
    template: Template,
}

impl PromptSet {
    pub fn from_records(records: Vec<PromptRecord>, template: Template) -> Self {
        let index = records.iter().enumerate().map(|(i, r)| (r.prompt_id.clone(), i)).collect();
        Self { records, index, template }
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, prompt_id: &str) -> Option<&PromptRecord> {
        self.index.get(prompt_id).map(|&i| &self.records[i])
    }

    /// The role-swapped, relation-inverted partner of `record`.
    pub fn counterfactual_of(&self, record: &PromptRecord) -> Result<&PromptRecord, DatasetError> {
        self.get(&record.counterfactual_id).ok_or_else(|| DatasetError::DanglingCounterfactual {
            id: record.prompt_id.clone(),
            target: record.counterfactual_id.clone(),
        })
    }

    /// prompt_id → counterfactual_id for every record.
    pub fn pairing(&self) -> BTreeMap<String, String> {
        self.records.iter().map(|r| (r.prompt_id.clone(), r.counterfactual_id.clone())).collect()
    }

    /// Canonical `prompts.jsonl` bytes.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("prompt record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, template: Template) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line).map_err(|source| DatasetError::Parse {
                path: PROMPTS_FILE.to_string(),
                line: i + 1,
                source,
            })?;
            records.push(rec);
        }
        Ok(Self::from_records(records, template))
    }
}

/// Expand `pairs` into the four-relation prompt set and its metadata.
pub fn build_prompts(
    pairs: &[ObjectPair],
    template: &Template,
    version: &str,
) -> Result<(PromptSet, DatasetMeta), DatasetError> {
    template.validate()?;
    let mut seen: HashMap<(&str, &str), usize> = HashMap::new();
    for (index, pair) in pairs.iter().enumerate() {
        if pair.a.is_empty() || pair.b.is_empty() {
            return Err(DatasetError::EmptyLabel { index });
        }
        if pair.a == pair.b {
            return Err(DatasetError::IdenticalLabels { index, label: pair.a.clone() });
        }
        if let Some(&first) = seen.get(&pair.unordered_key()) {
            return Err(DatasetError::DuplicatePair { index, first, a: pair.a.clone(), b: pair.b.clone() });
        }
        seen.insert(pair.unordered_key(), index);
    }

    let mut records = Vec::with_capacity(pairs.len() * 4);
    for (index, pair) in pairs.iter().enumerate() {
        let pair_id = format!("pair_{index:03}");
        for relation in Relation::ALL {
            // left_of / above keep (A, B); their inverses swap roles.
            let (a, b) = match relation {
                Relation::LeftOf | Relation::Above => (&pair.a, &pair.b),
                Relation::RightOf | Relation::Below => (&pair.b, &pair.a),
            };
            records.push(PromptRecord {
                prompt_id: format!("{index:03}_{relation}"),
                object_a: a.clone(),
                object_b: b.clone(),
                relation,
                text: template.render(a, relation, b),
                pair_id: pair_id.clone(),
                counterfactual_id: format!("{index:03}_{}", relation.inverse()),
                axis_group: relation.axis(),
            });
        }
    }

    let set = PromptSet::from_records(records, template.clone());
    let meta = describe(&set, version);
    Ok((set, meta))
}

/// Compute metadata (counts and digest) for an existing set.
pub fn describe(set: &PromptSet, version: &str) -> DatasetMeta {
    let object_pairs = set.records.iter().map(|r| r.pair_id.as_str()).collect::<BTreeSet<_>>().len();
    let unique_objects =
        set.records.iter().flat_map(|r| [r.object_a.as_str(), r.object_b.as_str()]).collect::<BTreeSet<_>>().len();
    let per_relation = set.records.iter().filter(|r| r.relation == Relation::LeftOf).count();
    DatasetMeta {
        version: version.to_string(),
        total_prompts: set.len(),
        object_pairs,
        counterfactual_pairs: set.len() / 2,
        prompts_per_relation: per_relation,
        unique_objects,
        content_digest: sha256_hex(set.to_jsonl().as_bytes()),
        template: set.template.clone(),
    }
}

/// Write `prompts.jsonl`, `dataset_meta.json` and `sha256.txt` into `dir`.
pub fn write_dataset(dir: &Path, set: &PromptSet, meta: &DatasetMeta) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let jsonl = set.to_jsonl();
    fs::write(dir.join(PROMPTS_FILE), &jsonl)?;
    let mut meta_json = serde_json::to_string_pretty(meta)?;
    meta_json.push('\n');
    fs::write(dir.join(META_FILE), meta_json)?;
    fs::write(dir.join(CHECKSUM_FILE), checksum_line(&sha256_hex(jsonl.as_bytes()), PROMPTS_FILE))?;
    Ok(())
}

/// Load a prompt file. If a `dataset_meta.json` sits next to it, its template
/// is used; otherwise the default template.
pub fn load_prompts(path: &Path) -> Result<(PromptSet, Option<DatasetMeta>), DatasetError> {
    let meta_path = path.with_file_name(META_FILE);
    let meta: Option<DatasetMeta> =
        if meta_path.exists() { Some(serde_json::from_str(&fs::read_to_string(&meta_path)?)?) } else { None };
    let template = meta.as_ref().map(|m| m.template.clone()).unwrap_or_default();
    let text = fs::read_to_string(path)?;
    let set = PromptSet::from_jsonl(&text, template).map_err(|e| match e {
        DatasetError::Parse { line, source, .. } => {
            DatasetError::Parse { path: path.display().to_string(), line, source }
        }
        other => other,
    })?;
    Ok((set, meta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateId,
    IdenticalObjects,
    DanglingCounterfactual,
    NotInvolution,
    NonInverseCounterfactual,
    ObjectsNotSwapped,
    AxisMismatch,
    TextMismatch,
    CountMismatch,
    DigestMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub record_id: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    fn push(&mut self, kind: ViolationKind, record_id: Option<&str>, detail: String) {
        self.violations.push(Violation { kind, record_id: record_id.map(str::to_string), detail });
    }
}

/// Check every record and metadata invariant. Pairing checks are reported once
/// per counterfactual pair, not once per side.
pub fn validate_dataset(set: &PromptSet, meta: &DatasetMeta) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut ids = BTreeSet::new();
    for r in &set.records {
        if !ids.insert(r.prompt_id.as_str()) {
            report.push(ViolationKind::DuplicateId, Some(&r.prompt_id), "prompt_id appears more than once".into());
        }
    }

    for r in &set.records {
        let id = Some(r.prompt_id.as_str());
        if r.object_a == r.object_b {
            report.push(ViolationKind::IdenticalObjects, id, format!("object `{}` on both sides", r.object_a));
        }
        if r.axis_group != r.relation.axis() {
            report.push(
                ViolationKind::AxisMismatch,
                id,
                format!("axis_group {} for relation {}", r.axis_group, r.relation),
            );
        }
        let expected = set.template.render(&r.object_a, r.relation, &r.object_b);
        if r.text != expected {
            report.push(ViolationKind::TextMismatch, id, format!("expected `{expected}`"));
        }

        let Some(cf) = set.get(&r.counterfactual_id) else {
            report.push(
                ViolationKind::DanglingCounterfactual,
                id,
                format!("counterfactual `{}` not found", r.counterfactual_id),
            );
            continue;
        };
        if cf.counterfactual_id != r.prompt_id {
            report.push(
                ViolationKind::NotInvolution,
                id,
                format!("`{}` links back to `{}`", cf.prompt_id, cf.counterfactual_id),
            );
            continue;
        }
        // Pair-level checks once, from the lexicographically smaller side.
        if r.prompt_id > cf.prompt_id {
            continue;
        }
        if cf.relation != r.relation.inverse() {
            report.push(
                ViolationKind::NonInverseCounterfactual,
                id,
                format!("{} paired with {} (`{}`)", r.relation, cf.relation, cf.prompt_id),
            );
        }
        if cf.object_a != r.object_b || cf.object_b != r.object_a {
            report.push(ViolationKind::ObjectsNotSwapped, id, format!("`{}` does not swap objects", cf.prompt_id));
        }
    }

    let actual = describe(set, &meta.version);
    let counts = [
        ("total_prompts", meta.total_prompts, actual.total_prompts, meta.object_pairs * 4),
        ("counterfactual_pairs", meta.counterfactual_pairs, actual.counterfactual_pairs, meta.object_pairs * 2),
        ("prompts_per_relation", meta.prompts_per_relation, actual.prompts_per_relation, meta.object_pairs),
        ("object_pairs", meta.object_pairs, actual.object_pairs, actual.object_pairs),
        ("unique_objects", meta.unique_objects, actual.unique_objects, actual.unique_objects),
    ];
    for (field, claimed, observed, implied) in counts {
        if claimed != observed || claimed != implied {
            report.push(
                ViolationKind::CountMismatch,
                None,
                format!("{field}: meta says {claimed}, set has {observed}, pair count implies {implied}"),
            );
        }
    }
    for r in Relation::ALL {
        let n = set.records.iter().filter(|p| p.relation == r).count();
        if n != meta.prompts_per_relation && r != Relation::LeftOf {
            report.push(
                ViolationKind::CountMismatch,
                None,
                format!("{r}: {n} prompts, expected {}", meta.prompts_per_relation),
            );
        }
    }
    if meta.content_digest != actual.content_digest {
        report.push(
            ViolationKind::DigestMismatch,
            None,
            format!("meta digest {} != content {}", meta.content_digest, actual.content_digest),
        );
    }
    report
}
