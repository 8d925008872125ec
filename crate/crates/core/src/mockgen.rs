//! Synthetic scenario generator for demos and end-to-end tests.
//!
//! Produces a prompt dataset, one manifest per method with SVG "images", a
//! mock scene file scripting what each detector reports, and a ground-truth
//! file standing in for a human annotator. Every abstention reason, detector
//! disagreement, secondary crashes and confident-looking false PASSes are
//! represented. Output is a pure function of the options.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::{SampleIdentity, VerdictKind};
use crate::detection::{
    DetectorBackend, MockBackend, MockDetector, MockImage, MockScenes, Perturbation, ScriptedDetections, WireDetection,
};
use crate::digest::sha256_hex;
use crate::prompts::{build_prompts, default_pairs, write_dataset, PromptRecord, Template};
use crate::relation::{Axis, Relation};
use crate::run::{Backends, ManifestRecord, RunError};

pub const PRIMARY_ID: &str = "mock-primary";
pub const SECONDARY_ID: &str = "mock-secondary";
pub const SCENES_FILE: &str = "scenes.json";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const PROMPTS_DIR: &str = "prompts";

const SIZE: u32 = 512;
const SIDE: f64 = SIZE as f64;

/// What happens in one generated image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Correct,
    Wrong,
    MissingA,
    MissingB,
    Ambiguous,
    Overlap,
    NearBoundary,
    Unstable,
    SecondaryDisagrees,
    SecondaryCrash,
    /// Detector boxes are misplaced: the checker sees PASS, a human sees FAIL.
    FalsePass,
}

impl Scenario {
    pub const ALL: [Scenario; 11] = [
        Scenario::Correct,
        Scenario::Wrong,
        Scenario::MissingA,
        Scenario::MissingB,
        Scenario::Ambiguous,
        Scenario::Overlap,
        Scenario::NearBoundary,
        Scenario::Unstable,
        Scenario::SecondaryDisagrees,
        Scenario::SecondaryCrash,
        Scenario::FalsePass,
    ];
}

/// A method's scenario mix, as relative weights in [`Scenario::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodProfile {
    pub name: String,
    pub weights: [u32; 11],
}

impl MethodProfile {
    pub fn defaults() -> Vec<MethodProfile> {
        vec![
            MethodProfile { name: "prompt_only".into(), weights: [12, 8, 22, 20, 8, 5, 10, 5, 3, 3, 4] },
            MethodProfile { name: "boxdiff".into(), weights: [38, 4, 14, 12, 5, 3, 9, 4, 4, 3, 4] },
            MethodProfile { name: "gligen".into(), weights: [52, 2, 10, 8, 4, 2, 8, 3, 4, 3, 4] },
        ]
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> Scenario {
        let total: u32 = self.weights.iter().sum();
        let mut r = rng.random_range(0..total);
        for (s, w) in Scenario::ALL.iter().zip(self.weights) {
            if r < w {
                return *s;
            }
            r -= w;
        }
        unreachable!("weights cover the range")
    }
}

#[derive(Debug, Clone)]
pub struct MockGenOptions {
    pub run_id: String,
    /// Number of object pairs from the default list (4 prompts each).
    pub pairs: usize,
    pub k: usize,
    pub seed: u64,
    pub methods: Vec<MethodProfile>,
}

impl Default for MockGenOptions {
    fn default() -> Self {
        Self { run_id: "demo".into(), pairs: 50, k: 4, seed: 7, methods: MethodProfile::defaults() }
    }
}

#[derive(Debug, Clone)]
pub struct MockGenSummary {
    pub prompts_file: PathBuf,
    pub scenes_file: PathBuf,
    pub truth_file: PathBuf,
    /// `(method, manifest path)`.
    pub manifests: Vec<(String, PathBuf)>,
    pub scenario_counts: BTreeMap<String, BTreeMap<Scenario, u64>>,
}

/// Ground truth for one image, as a careful human would label it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub sample_id: String,
    pub verdict: VerdictKind,
    pub scenario: Scenario,
}

struct Placed {
    a: [f64; 4],
    b: [f64; 4],
}

fn place(rng: &mut ChaCha8Rng, axis: Axis, d: f64, size_a: f64, size_b: f64) -> Placed {
    // Centers straddle the middle along the relation axis.
    let ca = SIDE / 2.0 + d * SIDE / 2.0;
    let cb = SIDE / 2.0 - d * SIDE / 2.0;
    let cross = rng.random_range(180.0..332.0);
    let rect = |c: f64, s: f64| match axis {
        Axis::Horizontal => [c - s / 2.0, cross - s / 2.0, c + s / 2.0, cross + s / 2.0],
        Axis::Vertical => [cross - s / 2.0, c - s / 2.0, cross + s / 2.0, c + s / 2.0],
    };
    Placed { a: rect(ca, size_a), b: rect(cb, size_b) }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn wire(label: &str, score: f64, b: [f64; 4]) -> WireDetection {
    let clamp = |v: f64| round2(v.clamp(0.0, SIDE));
    WireDetection {
        label: label.to_string(),
        score: (score * 1000.0).round() / 1000.0,
        bbox: [clamp(b[0]), clamp(b[1]), clamp(b[2]), clamp(b[3])],
    }
}

fn jitter(rng: &mut ChaCha8Rng, b: [f64; 4]) -> [f64; 4] {
    let dx = rng.random_range(-3.0..3.0);
    let dy = rng.random_range(-3.0..3.0);
    [b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy]
}

/// Signed delta that satisfies (`correct`) or violates the relation.
fn signed(relation: Relation, magnitude: f64, correct: bool) -> f64 {
    let s = relation.expected_sign() * magnitude;
    if correct {
        s
    } else {
        -s
    }
}

struct Scripted {
    primary: ScriptedDetections,
    secondary: ScriptedDetections,
    truth: VerdictKind,
    /// Boxes drawn in the image: (label, box, colour).
    drawn: Vec<(String, [f64; 4], &'static str)>,
}

fn script(rng: &mut ChaCha8Rng, prompt: &PromptRecord, scenario: Scenario) -> Scripted {
    let rel = prompt.relation;
    let (a, b) = (prompt.object_a.as_str(), prompt.object_b.as_str());
    let size_a = rng.random_range(70.0..120.0);
    let size_b = rng.random_range(70.0..120.0);
    let strong = |rng: &mut ChaCha8Rng| rng.random_range(0.72..0.98);
    // Secondary scores sometimes fall in [0.35, 0.4) so a 0.4 threshold matters.
    let sec_score = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.25) {
            rng.random_range(0.355..0.395)
        } else {
            rng.random_range(0.5..0.95)
        }
    };

    let clear = rng.random_range(0.2..0.6);
    let (true_d, seen_d) = match scenario {
        Scenario::Wrong => {
            let d = signed(rel, clear, false);
            (d, d)
        }
        Scenario::NearBoundary => {
            let d = signed(rel, rng.random_range(0.02..0.095), rng.random_bool(0.7));
            (d, d)
        }
        Scenario::Overlap => {
            let d = signed(rel, rng.random_range(0.01..0.04), true);
            (d, d)
        }
        Scenario::FalsePass => {
            (signed(rel, rng.random_range(0.05..0.2), false), signed(rel, rng.random_range(0.045..0.13), true))
        }
        _ => {
            let d = signed(rel, clear, true);
            (d, d)
        }
    };
    let (size_a, size_b) = if scenario == Scenario::Overlap { (150.0, 150.0) } else { (size_a, size_b) };
    let mut cross_rng = rng.clone();
    let truth_boxes = place(&mut cross_rng, rel.axis(), true_d, size_a, size_b);
    let seen = place(rng, rel.axis(), seen_d, size_a, size_b);
    let (sa, sb) = if scenario == Scenario::FalsePass {
        (rng.random_range(0.52..0.65), rng.random_range(0.52..0.65))
    } else {
        (strong(rng), strong(rng))
    };

    let mut base = vec![wire(a, sa, seen.a), wire(b, sb, seen.b)];
    let mut overrides = BTreeMap::new();
    let mut drawn = vec![(a.to_string(), truth_boxes.a, "#d62728"), (b.to_string(), truth_boxes.b, "#1f77b4")];
    let mut truth = if true_d.abs() < 0.03 {
        VerdictKind::Undecidable
    } else if true_d * rel.expected_sign() > 0.0 {
        VerdictKind::Pass
    } else {
        VerdictKind::Fail
    };
    match scenario {
        Scenario::MissingA => {
            base.remove(0);
        }
        Scenario::MissingB => {
            // Either absent or too small to count.
            if rng.random_bool(0.5) {
                base.pop();
            } else {
                let t = seen.b;
                let cx = (t[0] + t[2]) / 2.0;
                let cy = (t[1] + t[3]) / 2.0;
                base[1] = wire(b, sb, [cx - 12.0, cy - 12.0, cx + 12.0, cy + 12.0]);
            }
        }
        Scenario::Ambiguous => {
            let twin = place(rng, rel.axis(), -true_d, size_a, size_a);
            let s2 = (sa - rng.random_range(0.0..0.08)).max(0.5);
            base.push(wire(a, s2, twin.a));
            drawn.push((a.to_string(), twin.a, "#d62728"));
            truth = VerdictKind::Undecidable;
        }
        Scenario::Unstable => {
            let keys: Vec<String> = Perturbation::standard_set().iter().map(|p| p.key()).collect();
            let keep = rng.random_range(0..keys.len());
            for (i, k) in keys.iter().enumerate() {
                if i != keep {
                    overrides.insert(k.clone(), vec![wire(a, sa, seen.a)]);
                }
            }
        }
        _ => {}
    }

    let mut secondary = ScriptedDetections::default();
    match scenario {
        Scenario::SecondaryCrash => secondary.fail = true,
        Scenario::SecondaryDisagrees => {
            let flipped = place(rng, rel.axis(), -seen_d, size_a, size_b);
            secondary.base = vec![wire(a, sec_score(rng), flipped.a), wire(b, sec_score(rng), flipped.b)];
        }
        Scenario::MissingA => {
            secondary.base = vec![wire(b, sec_score(rng), jitter(rng, seen.b))];
        }
        _ => {
            secondary.base = base
                .iter()
                .map(|d| {
                    let [x1, y1, x2, y2] = d.bbox;
                    wire(&d.label, sec_score(rng), jitter(rng, [x1, y1, x2, y2]))
                })
                .collect();
        }
    }
    Scripted { primary: ScriptedDetections { base, overrides, fail: false }, secondary, truth, drawn }
}

fn render_svg(prompt: &PromptRecord, seed: u64, drawn: &[(String, [f64; 4], &'static str)]) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"#f4f1ea\"/>\n"
    );
    for (label, b, colour) in drawn {
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{colour}\" fill-opacity=\"0.35\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\">{label}</text>",
            b[0],
            b[1],
            b[2] - b[0],
            b[3] - b[1],
            b[0] + 4.0,
            b[1] + 16.0
        );
    }
    let _ = writeln!(s, "<text x=\"8\" y=\"500\" font-size=\"12\">{} (seed {seed})</text>\n</svg>", prompt.text);
    s
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| RunError::Io { path: path.to_path_buf(), source })
}

fn sample_rng(seed: u64, method: &str, prompt_id: &str, image_seed: u64) -> ChaCha8Rng {
    let h = sha256_hex(format!("{seed}/{method}/{prompt_id}/{image_seed}").as_bytes());
    let v = u64::from_str_radix(&h[..16], 16).expect("hex digest");
    ChaCha8Rng::seed_from_u64(v)
}

/// Write the scenario under `root`.
pub fn generate(root: &Path, opts: &MockGenOptions) -> Result<MockGenSummary, RunError> {
    let pairs: Vec<_> = default_pairs().into_iter().take(opts.pairs).collect();
    if pairs.is_empty() || opts.k == 0 || opts.methods.is_empty() {
        return Err(RunError::Integrity("mock scenario needs pairs, seeds and methods".into()));
    }
    let (set, meta) =
        build_prompts(&pairs, &Template::default(), "v1.0.1").map_err(|e| RunError::Integrity(e.to_string()))?;
    let prompts_dir = root.join(PROMPTS_DIR);
    write_dataset(&prompts_dir, &set, &meta).map_err(|e| RunError::Integrity(e.to_string()))?;

    let mut scenes = MockScenes::default();
    scenes.detectors.insert(PRIMARY_ID.into(), MockDetector { score_floor: 0.5 });
    scenes.detectors.insert(SECONDARY_ID.into(), MockDetector { score_floor: 0.35 });
    let mut truth = Vec::new();
    let mut manifests = Vec::new();
    let mut scenario_counts = BTreeMap::new();

    for method in &opts.methods {
        let run_dir = root.join("runs").join(&opts.run_id).join(&method.name);
        let mut manifest = String::new();
        let counts: &mut BTreeMap<Scenario, u64> = scenario_counts.entry(method.name.clone()).or_default();
        for prompt in set.records() {
            for seed in 0..opts.k as u64 {
                let mut rng = sample_rng(opts.seed, &method.name, &prompt.prompt_id, seed);
                let scenario = method.pick(&mut rng);
                *counts.entry(scenario).or_default() += 1;
                let scripted = script(&mut rng, prompt, scenario);
                let rel_image = format!("images/{}_s{seed}.svg", prompt.prompt_id);
                let svg = render_svg(prompt, seed, &scripted.drawn);
                write_file(&run_dir.join(&rel_image), &svg)?;
                let key = format!("runs/{}/{}/{rel_image}", opts.run_id, method.name);
                let mut detections = BTreeMap::new();
                detections.insert(PRIMARY_ID.to_string(), scripted.primary);
                detections.insert(SECONDARY_ID.to_string(), scripted.secondary);
                scenes.images.insert(key, MockImage { width: SIZE, height: SIZE, detections });
                let record = ManifestRecord {
                    run_id: opts.run_id.clone(),
                    method: method.name.clone(),
                    prompt_id: prompt.prompt_id.clone(),
                    seed,
                    image: rel_image,
                    gen_digest: sha256_hex(svg.as_bytes()),
                };
                manifest.push_str(&serde_json::to_string(&record)?);
                manifest.push('\n');
                let id = SampleIdentity {
                    prompt_id: prompt.prompt_id.clone(),
                    method: method.name.clone(),
                    seed,
                    image: record.image.clone(),
                };
                truth.push(TruthRecord { sample_id: id.sample_id(), verdict: scripted.truth, scenario });
            }
        }
        let manifest_path = run_dir.join("manifest.jsonl");
        write_file(&manifest_path, &manifest)?;
        manifests.push((method.name.clone(), manifest_path));
    }

    let scenes_file = root.join(SCENES_FILE);
    let mut scenes_text = serde_json::to_string_pretty(&scenes)?;
    scenes_text.push('\n');
    write_file(&scenes_file, &scenes_text)?;
    truth.sort_by(|x, y| x.sample_id.cmp(&y.sample_id));
    let truth_file = root.join(TRUTH_FILE);
    let mut truth_text = String::new();
    for t in &truth {
        truth_text.push_str(&serde_json::to_string(t)?);
        truth_text.push('\n');
    }
    write_file(&truth_file, &truth_text)?;
    Ok(MockGenSummary {
        prompts_file: prompts_dir.join(crate::prompts::PROMPTS_FILE),
        scenes_file,
        truth_file,
        manifests,
        scenario_counts,
    })
}

pub fn load_truth(path: &Path) -> Result<BTreeMap<String, TruthRecord>, RunError> {
    let text = fs::read_to_string(path).map_err(|source| RunError::Io { path: path.to_path_buf(), source })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let t: TruthRecord =
            serde_json::from_str(line).map_err(|e| RunError::Manifest { line: i + 1, msg: e.to_string() })?;
        out.insert(t.sample_id.clone(), t);
    }
    Ok(out)
}

/// In-process backends answering from `scenes`, with image paths taken
/// relative to `base_dir` (the scenario root).
pub fn mock_backends(scenes: Arc<MockScenes>, base_dir: &Path) -> Backends<'static> {
    let (s1, b1) = (scenes.clone(), base_dir.to_path_buf());
    let (s2, b2) = (scenes, base_dir.to_path_buf());
    Backends {
        primary: Box::new(move || {
            Ok(Box::new(MockBackend::new(s1.clone(), PRIMARY_ID, b1.clone())?) as Box<dyn DetectorBackend>)
        }),
        secondary: Some(Box::new(move || {
            Ok(Box::new(MockBackend::new(s2.clone(), SECONDARY_ID, b2.clone())?) as Box<dyn DetectorBackend>)
        })),
    }
}
