//! Minimal standalone SVG charts for the experiment reports.

use std::fmt::Write;

use scrfocus::experiment::{AblationReport, CompareReport};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

struct Doc(String);

impl Doc {
    fn new(title: &str, seed: u64, config_hash: &str) -> Self {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, "<!-- seed {seed} config_hash {config_hash} -->");
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        Doc(s)
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.0,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.0,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dash: bool) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let dash = if dash { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.0,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"{dash}/>"#,
            p.join(" ")
        );
        for (x, y) in pts {
            let _ = writeln!(self.0, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{stroke}"/>"#);
        }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.0,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="{fill}"/>"#
        );
    }

    fn axes(&mut self, x_label: &str, y_label: &str) {
        self.line(LEFT, H - BOTTOM, W - RIGHT, H - BOTTOM, "black");
        self.line(LEFT, TOP, LEFT, H - BOTTOM, "black");
        self.text((LEFT + W - RIGHT) / 2.0, H - 15.0, "middle", x_label);
        let _ = writeln!(
            self.0,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            escape(y_label)
        );
    }

    fn finish(mut self) -> String {
        self.0.push_str("</svg>\n");
        self.0
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_of(v: f64, lo: f64, hi: f64) -> f64 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    H - BOTTOM - t * (H - TOP - BOTTOM)
}

/// Aggregate score per radius over the per-sequence normalized errors.
pub fn ablation(report: &AblationReport) -> String {
    let s = &report.score;
    let mut doc = Doc::new("Sampling radius ablation", report.seed, &report.config_hash);
    doc.axes("sampling radius (px)", "normalized median translation error");
    let n = s.radii.len();
    let x_of = |i: usize| LEFT + (i as f64 + 0.5) * (W - LEFT - RIGHT) / n as f64;
    let all = s.scores.iter().chain(s.normalized.iter().flatten());
    let hi = all.clone().fold(1.0f64, |m, v| m.max(*v)) * 1.05;
    let lo = 1.0f64.min(all.fold(f64::INFINITY, |m, v| m.min(*v))) * 0.95;
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let y = y_of(v, lo, hi);
        doc.line(LEFT - 4.0, y, LEFT, y, "black");
        doc.text(LEFT - 6.0, y + 4.0, "end", &format!("{v:.2}"));
    }
    for (i, r) in s.radii.iter().enumerate() {
        doc.text(x_of(i), H - BOTTOM + 16.0, "middle", &format!("{r}"));
    }
    for (k, row) in s.normalized.iter().enumerate() {
        let pts: Vec<(f64, f64)> = row.iter().enumerate().map(|(i, v)| (x_of(i), y_of(*v, lo, hi))).collect();
        doc.polyline(&pts, PALETTE[(k + 1) % PALETTE.len()], 1.0, true);
    }
    let pts: Vec<(f64, f64)> = s.scores.iter().enumerate().map(|(i, v)| (x_of(i), y_of(*v, lo, hi))).collect();
    doc.polyline(&pts, PALETTE[0], 2.5, false);
    let (bx, by) = pts[s.argmin];
    doc.text(bx, by - 10.0, "middle", &format!("best rho = {}", s.best_radius()));
    doc.finish()
}

/// Median buffer reprojection error per sequence and strategy, log scale.
pub fn comparison(report: &CompareReport) -> String {
    let mut doc = Doc::new("Buffer reprojection error after training", report.seed, &report.config_hash);
    doc.axes("sequence", "median reprojection error (px, log scale)");
    let values: Vec<f64> = report.rows.iter().map(|r| r.median_reproj_px.max(1e-3)).collect();
    let lo = values.iter().fold(f64::INFINITY, |m, v| m.min(*v)).log10().floor();
    let hi = values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)).log10().ceil().max(lo + 1.0);
    for d in lo as i32..=hi as i32 {
        let y = y_of(d as f64, lo, hi);
        doc.line(LEFT - 4.0, y, LEFT, y, "black");
        doc.text(LEFT - 6.0, y + 4.0, "end", &format!("1e{d}"));
    }
    let mut sequences: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !sequences.contains(&r.sequence.as_str()) {
            sequences.push(&r.sequence);
        }
    }
    let group = (W - LEFT - RIGHT) / sequences.len().max(1) as f64;
    let bar = group * 0.3;
    for (g, seq) in sequences.iter().enumerate() {
        let x0 = LEFT + g as f64 * group + group * 0.2;
        for (j, row) in report.rows.iter().filter(|r| r.sequence == *seq).enumerate() {
            let v = row.median_reproj_px.max(1e-3).log10();
            let y = y_of(v, lo, hi);
            let color = if row.strategy == "focus" { PALETTE[0] } else { PALETTE[1] };
            doc.rect(x0 + j as f64 * bar, y, bar * 0.9, H - BOTTOM - y, color);
            doc.text(x0 + j as f64 * bar + bar * 0.45, y - 4.0, "middle", &format!("{:.1}", row.median_reproj_px));
        }
        doc.text(x0 + bar, H - BOTTOM + 16.0, "middle", seq);
    }
    doc.rect(W - RIGHT - 150.0, TOP, 10.0, 10.0, PALETTE[0]);
    doc.text(W - RIGHT - 135.0, TOP + 9.0, "start", &format!("focus (rho = {})", report.rho));
    doc.rect(W - RIGHT - 150.0, TOP + 16.0, 10.0, 10.0, PALETTE[1]);
    doc.text(W - RIGHT - 135.0, TOP + 25.0, "start", "random");
    doc.finish()
}
