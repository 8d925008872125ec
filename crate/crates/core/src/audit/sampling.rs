//! Stratified audit sampling over method × relation × verdict, split further
//! by confidence bin when a stratum is large enough.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AuditError;
use crate::checker::{CheckOutcome, VerdictKind};
use crate::prompts::PromptSet;
use crate::relation::Relation;

/// Interior bin edges; `[0.3, 0.7]` gives `[0,0.3) [0.3,0.7) [0.7,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBins {
    edges: Vec<f64>,
    /// Strata with more than this many samples are split by bin.
    pub min_stratum: usize,
}

impl Default for ConfidenceBins {
    fn default() -> Self {
        Self { edges: vec![0.3, 0.7], min_stratum: 3 }
    }
}

impl ConfidenceBins {
    pub fn new(edges: Vec<f64>, min_stratum: usize) -> Result<Self, AuditError> {
        if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| !(0.0 < *e && *e < 1.0)) {
            return Err(AuditError::Invalid(format!("bin edges {edges:?} must increase strictly inside (0,1)")));
        }
        Ok(Self { edges, min_stratum })
    }

    pub fn bin_of(&self, confidence: f64) -> usize {
        self.edges.iter().take_while(|e| confidence >= **e).count()
    }

    pub fn label(&self, bin: usize) -> String {
        let lo = if bin == 0 { 0.0 } else { self.edges[bin - 1] };
        if bin == self.edges.len() {
            format!("[{lo},1]")
        } else {
            format!("[{lo},{})", self.edges[bin])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stratum {
    pub method: String,
    pub relation: Relation,
    pub verdict: VerdictKind,
    pub bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub sample_id: String,
    pub method: String,
    pub relation: Relation,
    pub verdict: VerdictKind,
    /// Empty when the stratum was not split by confidence.
    pub confidence_bin: String,
    pub prompt_id: String,
    pub seed: u64,
    pub image: String,
    pub prompt_text: String,
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to the
/// earlier index.
pub fn apportion(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u64 = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut alloc: Vec<u64> = weights.iter().map(|w| total * w / sum).collect();
    let mut rest = total - alloc.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Remainders compared exactly as integers over the common denominator.
    order.sort_by_key(|&i| std::cmp::Reverse(total * weights[i] % sum));
    for i in order {
        if rest == 0 {
            break;
        }
        if !(total * weights[i]).is_multiple_of(sum) {
            alloc[i] += 1;
            rest -= 1;
        }
    }
    alloc
}

pub fn strata<'a>(outcomes: &'a [CheckOutcome], bins: &ConfidenceBins) -> BTreeMap<Stratum, Vec<&'a CheckOutcome>> {
    let mut coarse: BTreeMap<(String, Relation, VerdictKind), Vec<&CheckOutcome>> = BTreeMap::new();
    for o in outcomes {
        coarse.entry((o.method.clone(), o.relation, o.verdict)).or_default().push(o);
    }
    let mut out = BTreeMap::new();
    for ((method, relation, verdict), members) in coarse {
        let split = members.len() > bins.min_stratum;
        for o in members {
            let key =
                Stratum { method: method.clone(), relation, verdict, bin: split.then(|| bins.bin_of(o.confidence)) };
            out.entry(key).or_insert_with(Vec::new).push(o);
        }
    }
    for members in out.values_mut() {
        members.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    }
    out
}

/// Draw exactly `n` samples: one per non-empty stratum, the remainder in
/// proportion to each stratum's spare capacity.
pub fn stratified_sample(
    outcomes: &[CheckOutcome],
    prompts: &PromptSet,
    n: usize,
    bins: &ConfidenceBins,
    seed: u64,
) -> Result<Vec<AuditSample>, AuditError> {
    if n > outcomes.len() {
        return Err(AuditError::Infeasible(format!(
            "requested {n} samples but only {} outcomes exist",
            outcomes.len()
        )));
    }
    let groups = strata(outcomes, bins);
    if n < groups.len() {
        return Err(AuditError::Infeasible(format!(
            "{} non-empty strata need at least {} samples; {n} requested ({} short)",
            groups.len(),
            groups.len(),
            groups.len() - n
        )));
    }
    let spare: Vec<u64> = groups.values().map(|m| m.len() as u64 - 1).collect();
    let extra = apportion((n - groups.len()) as u64, &spare);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for ((stratum, members), add) in groups.iter().zip(extra) {
        let take = 1 + add as usize;
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), take).into_vec();
        picked.sort_unstable();
        for i in picked {
            let o = members[i];
            let prompt = prompts.get(&o.prompt_id).ok_or_else(|| AuditError::UnknownPrompt(o.prompt_id.clone()))?;
            out.push(AuditSample {
                sample_id: o.sample_id.clone(),
                method: o.method.clone(),
                relation: o.relation,
                verdict: o.verdict,
                confidence_bin: stratum.bin.map(|b| bins.label(b)).unwrap_or_default(),
                prompt_id: o.prompt_id.clone(),
                seed: o.seed,
                image: o.image.clone(),
                prompt_text: prompt.text.clone(),
            });
        }
    }
    Ok(out)
}

pub fn write_sample_csv<W: std::io::Write>(writer: W, samples: &[AuditSample]) -> Result<(), AuditError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sample_csv<R: std::io::Read>(reader: R) -> Result<Vec<AuditSample>, AuditError> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(AuditError::from)).collect()
}
