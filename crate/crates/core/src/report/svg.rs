//! Minimal deterministic SVG charts. Numbers are printed with fixed
//! precision so identical data gives identical bytes.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A plot area with `[0, x_max] × [0, y_max]` data coordinates.
pub struct Canvas {
    body: String,
    x_max: f64,
    y_max: f64,
}

impl Canvas {
    pub fn new(title: &str, x_label: &str, y_label: &str, x_max: f64, y_max: f64) -> Self {
        let mut c = Canvas { body: String::new(), x_max, y_max };
        let _ = writeln!(
            c.body,
            r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
            W / 2.0,
            esc(title)
        );
        let _ = writeln!(
            c.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
            LEFT + (W - LEFT - RIGHT) / 2.0,
            H - 12.0,
            esc(x_label)
        );
        let _ = writeln!(
            c.body,
            r#"<text x="16" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.2})">{}</text>"#,
            TOP + (H - TOP - BOTTOM) / 2.0,
            TOP + (H - TOP - BOTTOM) / 2.0,
            esc(y_label)
        );
        let _ = writeln!(
            c.body,
            r##"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
            W - LEFT - RIGHT,
            H - TOP - BOTTOM
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (x, y) = (c.px(f * x_max), c.py(f * y_max));
            let _ = writeln!(
                c.body,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
                H - BOTTOM + 14.0,
                tick(f * x_max)
            );
            let _ = writeln!(
                c.body,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
                LEFT - 6.0,
                y + 3.0,
                tick(f * y_max)
            );
        }
        c
    }

    pub fn px(&self, x: f64) -> f64 {
        LEFT + (x / self.x_max) * (W - LEFT - RIGHT)
    }

    pub fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y / self.y_max) * (H - TOP - BOTTOM)
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{:.2},{:.2}", self.px(*x), self.py(*y))).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="2"/>"#,
            pts.join(" ")
        );
    }

    pub fn circle(&mut self, x: f64, y: f64, stroke: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="{stroke}"/>"#, self.px(x), self.py(y));
    }

    /// Bar spanning data x range `[x0, x1]` from 0 to `y`.
    pub fn bar(&mut self, x0: f64, x1: f64, y: f64, fill: &str) {
        let (left, right) = (self.px(x0), self.px(x1));
        let (top, base) = (self.py(y), self.py(0.0));
        let _ = writeln!(
            self.body,
            r#"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
            right - left,
            base - top
        );
    }

    pub fn text(&mut self, x: f64, y: f64, s: &str, anchor: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}" font-size="11">{}</text>"#,
            self.px(x),
            self.py(y),
            esc(s)
        );
    }

    /// Legend entries in the top-right corner.
    pub fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (name, colour)) in entries.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            let x = W - RIGHT - 150.0;
            let _ =
                writeln!(self.body, r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{colour}"/>"#, y - 9.0);
            let _ = writeln!(self.body, r#"<text x="{:.2}" y="{y:.2}" font-size="11">{}</text>"#, x + 14.0, esc(name));
        }
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}
