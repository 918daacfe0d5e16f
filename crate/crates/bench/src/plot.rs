//! Plain SVG charts written by hand: scatter panels of endpoints over the
//! exact samples, and metric-versus-NFE lines with seed error bars.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::manifest::{CellStatus, RunKind, RunManifest};
use crate::sweep::read_points;
use crate::{BenchError, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Linear or logarithmic map from data to pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl IntoIterator<Item = f64>, px_lo: f64, px_hi: f64, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            if v.is_finite() && (!log || v > 0.0) {
                let v = if log { v.log10() } else { v };
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
            px_lo,
            px_hi,
            log,
        }
    }

    fn px(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self, count: usize) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            return (a..=b).map(|e| 10f64.powi(e)).collect();
        }
        let raw = (self.hi - self.lo) / count as f64;
        let mag = 10f64.powf(raw.log10().floor());
        let span = self.hi - self.lo;
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .min_by(|a, b| {
                let miss = |s: f64| (span / s - count as f64).abs();
                miss(*a).total_cmp(&miss(*b))
            })
            .unwrap();
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|k| k as f64 * step).collect()
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self {
            body: String::new(),
            width,
            height,
        }
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, size: f64, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-size="{size}" font-family="sans-serif">{}</text>"#,
            escape(text)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    fn frame(&mut self, x: &Axis, y: &Axis, xlabel: &str, ylabel: &str) {
        let (x0, x1, y0, y1) = (x.px_lo, x.px_hi, y.px_lo, y.px_hi);
        let _ = writeln!(
            self.body,
            r##"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            x1 - x0,
            y0 - y1
        );
        for t in x.ticks(6) {
            let p = x.px(t);
            self.line(p, y0, p, y0 + 4.0, "#444");
            self.text(p, y0 + 16.0, "middle", 10.0, &tick_label(t));
        }
        for t in y.ticks(5) {
            let p = y.px(t);
            self.line(x0 - 4.0, p, x0, p, "#444");
            self.text(x0 - 6.0, p + 3.0, "end", 10.0, &tick_label(t));
        }
        self.text((x0 + x1) / 2.0, y0 + 32.0, "middle", 11.0, xlabel);
        let (cx, cy) = (x0 - 44.0, (y0 + y1) / 2.0);
        let _ = writeln!(
            self.body,
            r#"<text x="{cx:.1}" y="{cy:.1}" text-anchor="middle" font-size="11" font-family="sans-serif" transform="rotate(-90 {cx:.1} {cy:.1})">{}</text>"#,
            escape(ylabel)
        );
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// One line of a line chart: `(x, mean, spread)` points; `None` marks a gap.
pub struct Series {
    pub label: String,
    pub points: Vec<Option<(f64, f64, f64)>>,
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log: bool) -> String {
    let (w, h) = (640.0, 420.0);
    let mut svg = Svg::new(w, h);
    let all = || series.iter().flat_map(|s| s.points.iter().flatten());
    let x = Axis::new(all().map(|p| p.0), 70.0, w - 170.0, log);
    let y = Axis::new(
        all()
            .flat_map(|p| [p.1 - p.2, p.1 + p.2, p.1])
            .filter(|v| !log || *v > 0.0),
        h - 60.0,
        40.0,
        log,
    );
    svg.text(w / 2.0, 22.0, "middle", 14.0, title);
    svg.frame(&x, &y, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for run in s.points.split(|p| p.is_none()) {
            let coords: Vec<String> = run
                .iter()
                .flatten()
                .map(|p| format!("{:.1},{:.1}", x.px(p.0), y.px(p.1)))
                .collect();
            if coords.len() > 1 {
                let _ = writeln!(
                    svg.body,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                    coords.join(" ")
                );
            }
        }
        for &(px, mean, spread) in s.points.iter().flatten() {
            let cx = x.px(px);
            if spread > 0.0 && (!log || mean - spread > 0.0) {
                svg.line(cx, y.px(mean - spread), cx, y.px(mean + spread), color);
            }
            let _ = writeln!(
                svg.body,
                r#"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                y.px(mean)
            );
        }
        let ly = 50.0 + 18.0 * i as f64;
        svg.line(w - 155.0, ly, w - 135.0, ly, color);
        svg.text(w - 130.0, ly + 4.0, "start", 11.0, &s.label);
    }
    svg.finish()
}

/// Small multiples: each panel overlays one point set on the reference.
pub fn scatter_panels(title: &str, reference: &[Vec<f64>], panels: &[(String, Vec<Vec<f64>>)]) -> String {
    let cols = panels.len().clamp(1, 3);
    let rows = panels.len().div_ceil(cols).max(1);
    let size = 220.0;
    let (w, h) = (
        cols as f64 * (size + 20.0) + 20.0,
        rows as f64 * (size + 40.0) + 50.0,
    );
    let mut svg = Svg::new(w, h);
    svg.text(w / 2.0, 24.0, "middle", 14.0, title);
    let coords = |p: &Vec<f64>| {
        (
            p.first().copied().unwrap_or(0.0),
            p.get(1).copied().unwrap_or(0.0),
        )
    };
    let pts = || {
        reference
            .iter()
            .chain(panels.iter().flat_map(|p| p.1.iter()))
            .map(coords)
    };
    // Shared square extent so panels are comparable.
    let xs = Axis::new(pts().map(|p| p.0), 0.0, 1.0, false);
    let ys = Axis::new(pts().map(|p| p.1), 0.0, 1.0, false);
    let half = 0.5 * (xs.hi - xs.lo).max(ys.hi - ys.lo);
    let (cx, cy) = (0.5 * (xs.lo + xs.hi), 0.5 * (ys.lo + ys.hi));
    for (k, (label, points)) in panels.iter().enumerate() {
        let ox = 20.0 + (k % cols) as f64 * (size + 20.0);
        let oy = 50.0 + (k / cols) as f64 * (size + 40.0);
        let x = Axis {
            lo: cx - half,
            hi: cx + half,
            px_lo: ox,
            px_hi: ox + size,
            log: false,
        };
        let y = Axis {
            lo: cy - half,
            hi: cy + half,
            px_lo: oy + size,
            px_hi: oy,
            log: false,
        };
        let _ = writeln!(
            svg.body,
            r##"<rect x="{ox:.1}" y="{oy:.1}" width="{size}" height="{size}" fill="none" stroke="#444"/>"##
        );
        svg.text(ox + size / 2.0, oy + size + 16.0, "middle", 12.0, label);
        for (set, color, opacity) in [
            (reference, "#999999", 0.35),
            (points.as_slice(), PALETTE[k % PALETTE.len()], 0.6),
        ] {
            let _ = writeln!(svg.body, r#"<g fill="{color}" fill-opacity="{opacity}">"#);
            for p in set {
                let (px, py) = coords(p);
                let _ = writeln!(
                    svg.body,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="1.2"/>"#,
                    x.px(px),
                    y.px(py)
                );
            }
            svg.body.push_str("</g>\n");
        }
    }
    svg.finish()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

/// Render the charts for a manifest into `plots/` next to it. Missing cells
/// or sample files leave gaps and add a warning to the saved manifest.
pub fn emit_plots(manifest_path: &Path) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let dir = base.join("plots");
    std::fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
    let mut written = Vec::new();
    let mut warnings = Vec::new();

    let mut names: Vec<String> = Vec::new();
    for c in &manifest.cells {
        if !names.contains(&c.target) {
            names.push(c.target.clone());
        }
    }

    for name in &names {
        let cells: Vec<_> = manifest.cells.iter().filter(|c| &c.target == name).collect();
        for c in cells.iter().filter(|c| c.status == CellStatus::Failed) {
            warnings.push(format!(
                "{name}/{}/N={}/seed={}: cell failed, plotted as a gap",
                c.sampler, c.steps, c.seed
            ));
        }
        let mut samplers: Vec<String> = Vec::new();
        for c in &cells {
            if !samplers.contains(&c.sampler) {
                samplers.push(c.sampler.clone());
            }
        }
        let mut steps: Vec<usize> = cells.iter().map(|c| c.steps).collect();
        steps.sort_unstable();
        steps.dedup();

        match manifest.kind {
            RunKind::Sweep => {
                let series: Vec<Series> = samplers
                    .iter()
                    .map(|s| {
                        let points = steps
                            .iter()
                            .map(|&n| {
                                let vals: Vec<f64> = cells
                                    .iter()
                                    .filter(|c| &c.sampler == s && c.steps == n)
                                    .filter_map(|c| c.report.as_ref()?.sliced_w2)
                                    .collect();
                                let nfe = cells.iter().find(|c| &c.sampler == s && c.steps == n)?.nfe;
                                if vals.is_empty() {
                                    return None;
                                }
                                let (m, sd) = mean_std(&vals);
                                Some((nfe as f64, m, sd))
                            })
                            .collect();
                        Series {
                            label: s.clone(),
                            points,
                        }
                    })
                    .collect();
                let path = dir.join(format!("{name}_metric.svg"));
                write(
                    &path,
                    &line_chart(
                        &format!("{name}: sliced W2 vs NFE"),
                        "NFE",
                        "sliced W2",
                        &series,
                        false,
                    ),
                )?;
                written.push(path);

                let lookup = |source: &str| {
                    manifest
                        .samples
                        .iter()
                        .find(|f| &f.target == name && f.source == source)
                        .map(|f| base.join(&f.path))
                };
                let reference = match lookup("exact").map(|p| read_points(&p)) {
                    Some(Ok(points)) => points,
                    _ => {
                        warnings.push(format!("{name}: exact samples missing from scatter plot"));
                        Vec::new()
                    }
                };
                let mut panels = Vec::new();
                for s in &samplers {
                    match lookup(s).map(|p| read_points(&p)) {
                        Some(Ok(points)) => panels.push((s.clone(), points)),
                        _ => {
                            warnings.push(format!("{name}/{s}: endpoint samples missing from scatter plot"));
                            panels.push((format!("{s} (missing)"), Vec::new()));
                        }
                    }
                }
                let smallest = steps.first().copied().unwrap_or(0);
                let path = dir.join(format!("{name}_scatter.svg"));
                write(
                    &path,
                    &scatter_panels(
                        &format!("{name}: endpoints at N={smallest} over exact samples"),
                        &reference,
                        &panels,
                    ),
                )?;
                written.push(path);
            }
            RunKind::OrderStudy => {
                let series: Vec<Series> = samplers
                    .iter()
                    .map(|s| Series {
                        label: s.clone(),
                        points: steps
                            .iter()
                            .map(|&n| {
                                let c = cells.iter().find(|c| &c.sampler == s && c.steps == n)?;
                                let e = c.report.as_ref()?.oracle_rmse?;
                                (e > 0.0).then_some((n as f64, e, 0.0))
                            })
                            .collect(),
                    })
                    .collect();
                let path = dir.join(format!("{name}_order.svg"));
                write(
                    &path,
                    &line_chart(&format!("{name}: endpoint RMSE vs N"), "N", "RMSE", &series, true),
                )?;
                written.push(path);
            }
        }
    }

    let mut seen = BTreeMap::new();
    for w in warnings {
        seen.entry(w.clone()).or_insert(w);
    }
    for w in seen.into_values() {
        if !manifest.warnings.contains(&w) {
            manifest.warnings.push(w);
        }
    }
    manifest.save(manifest_path)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_ticks_are_round() {
        let a = Axis::new([0.0, 9.3], 0.0, 100.0, false);
        let t = a.ticks(5);
        assert!(t.contains(&0.0) && t.contains(&4.0) && t.contains(&8.0));
        assert_eq!(a.px(a.lo), 0.0);
    }

    #[test]
    fn log_axis_maps_decades_evenly() {
        let a = Axis::new([1e-4, 1e-1], 0.0, 300.0, true);
        let d1 = a.px(1e-3) - a.px(1e-4);
        let d2 = a.px(1e-2) - a.px(1e-3);
        assert!((d1 - d2).abs() < 1e-9);
        assert_eq!(a.ticks(5), vec![1e-4, 1e-3, 1e-2, 1e-1]);
    }

    #[test]
    fn gaps_split_polylines() {
        let s = Series {
            label: "a<b".into(),
            points: vec![
                Some((1.0, 1.0, 0.1)),
                Some((2.0, 0.5, 0.0)),
                None,
                Some((4.0, 0.2, 0.0)),
                Some((5.0, 0.1, 0.0)),
            ],
        };
        let svg = line_chart("t & u", "x", "y", &[s], false);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b") && svg.contains("t &amp; u"));
    }
}
