//! Minimal SVG plots for the harness reports.

use std::fmt::Write as _;
use std::path::Path;

use super::{ComparisonReport, CorrelationReport, PhantomReport, PpcReport};
use muguide::error::{Error, Result};

const PANEL: f64 = 220.0;
const PAD: f64 = 30.0;

struct Doc {
    body: String,
    width: f64,
    height: f64,
}

impl Doc {
    fn new(width: f64, height: f64) -> Self {
        Doc { body: String::new(), width, height }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" fill-opacity="{opacity}"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;");
        let _ = writeln!(self.body, r#"<text x="{x:.2}" y="{y:.2}" font-size="11" font-family="sans-serif">{s}</text>"#);
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(self.body, r#"<polyline points="{}" fill="none" stroke="{stroke}"/>"#, p.join(" "));
    }

    fn polygon(&mut self, pts: &[(f64, f64)], fill: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(self.body, r#"<polygon points="{}" fill="{fill}" fill-opacity="0.35"/>"#, p.join(" "));
    }

    fn write(self, path: &Path) -> Result<()> {
        let s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        );
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Blue-white-red for values in [-1, 1].
fn diverging(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!("rgb({:.0},{:.0},{:.0})", r, g, b)
}

/// Greyscale for values in [0, 1]; NaN is drawn red.
fn grey(v: f64) -> String {
    if !v.is_finite() {
        return "rgb(200,0,0)".into();
    }
    let g = 255.0 * v.clamp(0.0, 1.0);
    format!("rgb({g:.0},{g:.0},{g:.0})")
}

/// One panel per parameter with overlaid flow and MCMC bias histograms.
pub fn bias_histograms(report: &ComparisonReport, path: impl AsRef<Path>) -> Result<()> {
    let n = report.parameters.len();
    let mut d = Doc::new(n as f64 * (PANEL + PAD) + PAD, PANEL + 2.0 * PAD);
    for (k, p) in report.parameters.iter().enumerate() {
        let x0 = PAD + k as f64 * (PANEL + PAD);
        let peak = p.bias_flow.counts.iter().chain(&p.bias_mcmc.counts).copied().max().unwrap_or(1).max(1) as f64;
        for (h, colour) in [(&p.bias_flow, "#d95f02"), (&p.bias_mcmc, "#1b9e77")] {
            let w = PANEL / h.counts.len() as f64;
            for (i, &c) in h.counts.iter().enumerate() {
                let hh = PANEL * c as f64 / peak;
                d.rect(x0 + i as f64 * w, PAD + PANEL - hh, w, hh, colour, 0.5);
            }
        }
        d.text(x0, PAD - 8.0, &format!("{} bias (flow orange, MCMC green)", p.name));
        d.text(x0, PAD + PANEL + 14.0, &format!("{:.3}", p.bias_flow.lo));
        d.text(x0 + PANEL - 30.0, PAD + PANEL + 14.0, &format!("{:.3}", p.bias_flow.hi));
    }
    d.write(path.as_ref())
}

/// One panel per truth: observed shell means and the reconstruction band.
pub fn ppc_envelopes(report: &PpcReport, path: impl AsRef<Path>) -> Result<()> {
    let cols = report.n_truths.min(5);
    let rows = report.n_truths.div_ceil(cols);
    let mut d = Doc::new(cols as f64 * (PANEL + PAD) + PAD, rows as f64 * (PANEL + PAD) + PAD);
    let bmax = report.shell_bvalues.iter().copied().fold(1.0, f64::max);
    for i in 0..report.n_truths {
        let (x0, y0) = (PAD + (i % cols) as f64 * (PANEL + PAD), PAD + (i / cols) as f64 * (PANEL + PAD));
        let px = |b: f64| x0 + PANEL * b / bmax;
        let py = |s: f64| y0 + PANEL * (1.0 - s.clamp(0.0, 1.0));
        let mut band: Vec<(f64, f64)> = report.shell_bvalues.iter().zip(&report.upper[i]).map(|(&b, &u)| (px(b), py(u))).collect();
        band.extend(report.shell_bvalues.iter().zip(&report.lower[i]).rev().map(|(&b, &l)| (px(b), py(l))));
        d.polygon(&band, "#7570b3");
        let obs: Vec<(f64, f64)> = report.shell_bvalues.iter().zip(&report.observed[i]).map(|(&b, &o)| (px(b), py(o))).collect();
        d.polyline(&obs, "black");
        d.text(x0, y0 - 6.0, &format!("truth {i}"));
    }
    d.write(path.as_ref())
}

/// Features (rows) against shell means (columns).
pub fn correlation_heatmap(report: &CorrelationReport, path: impl AsRef<Path>) -> Result<()> {
    let cell = 40.0;
    let nf = report.matrix.len();
    let ns = report.shell_bvalues.len();
    let mut d = Doc::new(ns as f64 * cell + 3.0 * PAD, nf as f64 * cell + 3.0 * PAD);
    for (k, row) in report.matrix.iter().enumerate() {
        for (s, &v) in row.iter().enumerate() {
            d.rect(2.0 * PAD + s as f64 * cell, 2.0 * PAD + k as f64 * cell, cell, cell, &diverging(v), 1.0);
            d.text(2.0 * PAD + s as f64 * cell + 4.0, 2.0 * PAD + k as f64 * cell + 24.0, &format!("{v:.2}"));
        }
        d.text(PAD - 10.0, 2.0 * PAD + k as f64 * cell + 24.0, &format!("F{k}"));
    }
    for (s, b) in report.shell_bvalues.iter().enumerate() {
        d.text(2.0 * PAD + s as f64 * cell + 2.0, 2.0 * PAD - 6.0, &format!("{b:.0}"));
    }
    d.write(path.as_ref())
}

/// Grid of maps: one row per parameter; truth, MAP (scaled to the truth
/// range), uncertainty and ambiguity (0 to 100 %).
pub fn phantom_grid(report: &PhantomReport, path: impl AsRef<Path>) -> Result<()> {
    let px = (PANEL / report.nx.max(report.ny) as f64).max(1.0);
    let (w, h) = (report.nx as f64 * px, report.ny as f64 * px);
    let mut d = Doc::new(4.0 * (w + PAD) + PAD, report.names.len() as f64 * (h + PAD) + PAD);
    for (j, name) in report.names.iter().enumerate() {
        let lo = report.truth[j].iter().copied().fold(f64::INFINITY, f64::min);
        let hi = report.truth[j].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let panels: [(&str, Vec<f64>); 4] = [
            ("truth", report.truth[j].iter().map(|v| (v - lo) / span).collect()),
            ("MAP", report.map[j].iter().map(|v| (v - lo) / span).collect()),
            ("uncertainty", report.uncertainty_pct[j].iter().map(|v| v / 100.0).collect()),
            ("ambiguity", report.ambiguity_pct[j].iter().map(|v| v / 100.0).collect()),
        ];
        let y0 = PAD + j as f64 * (h + PAD);
        for (c, (label, values)) in panels.iter().enumerate() {
            let x0 = PAD + c as f64 * (w + PAD);
            for (p, &v) in values.iter().enumerate() {
                d.rect(x0 + (p % report.nx) as f64 * px, y0 + (p / report.nx) as f64 * px, px, px, &grey(v), 1.0);
            }
            d.text(x0, y0 - 4.0, &format!("{name} {label}"));
        }
    }
    d.write(path.as_ref())
}
