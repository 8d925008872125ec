//! Straight-line re-implementation of the checker rules, written against the
//! rule text only. Shares no code with the crate beyond plain data.

pub struct Det {
    pub label: String,
    pub score: f64,
    pub b: [f64; 4],
}

pub struct Frame {
    pub w: f64,
    pub h: f64,
    pub floor: f64,
    pub dets: Vec<Det>,
}

pub enum Secondary {
    Frame(Frame),
    Failed,
    Absent,
}

pub struct Params {
    pub t_det: f64,
    pub min_area_fraction: f64,
    pub delta: f64,
    pub max_iou: f64,
    pub margin: f64,
    pub consistency: f64,
    pub gamma: f64,
    pub weights: [f64; 4],
    pub eps: f64,
}

/// `relation` is one of "left_of", "right_of", "above", "below".
pub struct Case {
    pub a: String,
    pub b: String,
    pub relation: &'static str,
    pub base: Frame,
    pub perturbed: Vec<Frame>,
    pub secondary: Secondary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    /// "PASS", "FAIL" or "UNDECIDABLE".
    pub verdict: &'static str,
    pub reason: Option<&'static str>,
    pub det: f64,
    pub geom: f64,
    pub stab: f64,
    pub agree: f64,
    pub overall: f64,
}

enum Pick<'a> {
    One(&'a Det),
    Missing,
    Ambiguous,
}

fn pick<'a>(f: &'a Frame, label: &str, p: &Params) -> Pick<'a> {
    let cut = if p.t_det > f.floor { p.t_det } else { f.floor };
    let mut best: Option<&Det> = None;
    let mut kept = Vec::new();
    for d in &f.dets {
        if d.label.to_lowercase() != label.to_lowercase() {
            continue;
        }
        if d.score < cut {
            continue;
        }
        let area = (d.b[2] - d.b[0]) * (d.b[3] - d.b[1]);
        if area < p.min_area_fraction * f.w * f.h {
            continue;
        }
        kept.push(d);
        if best.is_none() || d.score > best.unwrap().score {
            best = Some(d);
        }
    }
    let Some(top) = best else { return Pick::Missing };
    // Runner-up: the best score among the other survivors.
    let mut runner: Option<f64> = None;
    let mut skipped_top = false;
    for d in kept {
        if !skipped_top && std::ptr::eq(d, top) {
            skipped_top = true;
            continue;
        }
        if runner.is_none() || d.score > runner.unwrap() {
            runner = Some(d.score);
        }
    }
    if let Some(r) = runner {
        if top.score - r < p.delta {
            return Pick::Ambiguous;
        }
    }
    Pick::One(top)
}

fn horizontal(rel: &str) -> bool {
    rel == "left_of" || rel == "right_of"
}

fn delta(a: &Det, b: &Det, rel: &str, f: &Frame) -> f64 {
    if horizontal(rel) {
        ((a.b[0] + a.b[2]) / 2.0 - (b.b[0] + b.b[2]) / 2.0) / f.w
    } else {
        ((a.b[1] + a.b[3]) / 2.0 - (b.b[1] + b.b[3]) / 2.0) / f.h
    }
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// "PASS", "FAIL" or "near".
fn geometry(d: f64, rel: &str, m: f64) -> &'static str {
    if d.abs() <= m {
        return "near";
    }
    let pass = match rel {
        "left_of" => d < -m,
        "right_of" => d > m,
        "above" => d < -m,
        "below" => d > m,
        _ => unreachable!(),
    };
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Selection then geometry, without the overlap or stability gates.
/// Returns "PASS", "FAIL" or "ABSTAIN".
fn rerun(f: &Frame, c: &Case, p: &Params) -> &'static str {
    match (pick(f, &c.a, p), pick(f, &c.b, p)) {
        (Pick::One(a), Pick::One(b)) => match geometry(delta(a, b, c.relation, f), c.relation, p.margin) {
            "near" => "ABSTAIN",
            v => v,
        },
        _ => "ABSTAIN",
    }
}

fn overall(c: [f64; 4], p: &Params) -> f64 {
    let prod: f64 = c.iter().zip(p.weights).map(|(x, w)| (x + p.eps).powf(w)).product();
    prod.clamp(0.0, 1.0)
}

pub fn judge(c: &Case, p: &Params) -> Expected {
    let zero = |reason| Expected {
        verdict: "UNDECIDABLE",
        reason: Some(reason),
        det: 0.0,
        geom: 0.0,
        stab: 0.0,
        agree: 0.0,
        overall: 0.0,
    };
    let pa = pick(&c.base, &c.a, p);
    let pb = pick(&c.base, &c.b, p);
    let (a, b) = match (pa, pb) {
        (Pick::One(a), Pick::One(b)) => (a, b),
        (Pick::Missing, _) => return zero("missing"),
        (Pick::Ambiguous, _) => return zero("ambiguous"),
        (_, Pick::Missing) => return zero("missing"),
        (_, Pick::Ambiguous) => return zero("ambiguous"),
    };
    let d = delta(a, b, c.relation, &c.base);
    let det = (a.score * b.score).sqrt();
    let geom = ((d.abs() - p.margin) / p.gamma).clamp(0.0, 1.0);

    let gate = if horizontal(c.relation) && iou(&a.b, &b.b) > p.max_iou {
        Some("high_overlap")
    } else if d.abs() <= p.margin {
        Some("near_boundary")
    } else {
        None
    };
    if let Some(reason) = gate {
        return Expected {
            verdict: "UNDECIDABLE",
            reason: Some(reason),
            det,
            geom,
            stab: 0.5,
            agree: 0.5,
            overall: overall([det, geom, 0.5, 0.5], p),
        };
    }
    let base = geometry(d, c.relation, p.margin);
    let stab = if c.perturbed.is_empty() {
        1.0
    } else {
        let same = c.perturbed.iter().filter(|f| rerun(f, c, p) == base).count();
        same as f64 / c.perturbed.len() as f64
    };
    let agree = match &c.secondary {
        Secondary::Frame(f) => match rerun(f, c, p) {
            "ABSTAIN" => 0.5,
            v if v == base => 1.0,
            _ => 0.0,
        },
        Secondary::Failed | Secondary::Absent => 0.5,
    };
    let (verdict, reason) = if stab < p.consistency { ("UNDECIDABLE", Some("unstable")) } else { (base, None) };
    Expected { verdict, reason, det, geom, stab, agree, overall: overall([det, geom, stab, agree], p) }
}
