//! Deterministic SVG charts from CSV inputs.
//!
//! | kind | required columns | chart |
//! |---|---|---|
//! | `scatter` | `source,mean,var` | running mean vs variance per channel, one colour per source |
//! | `tradeoff` | `series,clean_acc,robust_acc` | clean vs robust accuracy curves; a series named `nofrost` is drawn as stars |
//! | `histogram` | `series,value` | overlaid 20-bin histograms |
//! | `eps_sweep` | `series,eps,robust_acc` | robust accuracy against the attack radius |
//! | `interpolation` | `strategy,gamma,clean_acc,robust_acc` | accuracy against gamma; clean dashed, robust solid |
//!
//! Extra columns are ignored. Output depends only on the rows, in order, so
//! the same CSV always renders to the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Scatter,
    Tradeoff,
    Histogram,
    EpsSweep,
    Interpolation,
}

impl PlotKind {
    pub const ALL: [PlotKind; 5] = [
        PlotKind::Scatter,
        PlotKind::Tradeoff,
        PlotKind::Histogram,
        PlotKind::EpsSweep,
        PlotKind::Interpolation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Scatter => "scatter",
            PlotKind::Tradeoff => "tradeoff",
            PlotKind::Histogram => "histogram",
            PlotKind::EpsSweep => "eps_sweep",
            PlotKind::Interpolation => "interpolation",
        }
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            PlotKind::Scatter => &["source", "mean", "var"],
            PlotKind::Tradeoff => &["series", "clean_acc", "robust_acc"],
            PlotKind::Histogram => &["series", "value"],
            PlotKind::EpsSweep => &["series", "eps", "robust_acc"],
            PlotKind::Interpolation => &["strategy", "gamma", "clean_acc", "robust_acc"],
        }
    }

    fn labels(self) -> (&'static str, &'static str, &'static str) {
        match self {
            PlotKind::Scatter => ("BN running statistics", "running mean", "running variance"),
            PlotKind::Tradeoff => ("Accuracy-robustness trade-off", "clean accuracy (%)", "robust accuracy (%)"),
            PlotKind::Histogram => ("Metric distribution", "value", "count"),
            PlotKind::EpsSweep => ("Robust accuracy vs attack radius", "eps (0-255)", "robust accuracy (%)"),
            PlotKind::Interpolation => ("Branch interpolation", "gamma", "accuracy (%)"),
        }
    }
}

impl std::str::FromStr for PlotKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown plot kind `{s}`")))
    }
}

/// A CSV file held as strings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(|v| v.trim().to_string()).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Keeps rows whose `col` equals `value`.
    pub fn filter(&self, col: &str, value: &str) -> Result<Table> {
        let i = self
            .column(col)
            .ok_or_else(|| HarnessError::Schema(format!("filter column `{col}` is missing")))?;
        Ok(Table {
            headers: self.headers.clone(),
            rows: self.rows.iter().filter(|r| r.get(i).map(String::as_str) == Some(value)).cloned().collect(),
        })
    }
}

/// Projects `tables` onto the kind's columns, checking the schema.
fn columns(kind: PlotKind, tables: &[Table]) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for (t, table) in tables.iter().enumerate() {
        let idx = kind
            .columns()
            .iter()
            .map(|c| {
                table.column(c).ok_or_else(|| {
                    HarnessError::Schema(format!(
                        "{} plot: input {} is missing column `{c}` (needs {})",
                        kind.name(),
                        t + 1,
                        kind.columns().join(",")
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (r, row) in table.rows.iter().enumerate() {
            let picked = idx
                .iter()
                .map(|&i| {
                    row.get(i).cloned().ok_or_else(|| {
                        HarnessError::Schema(format!("{} plot: input {} row {} is short", kind.name(), t + 1, r + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(picked);
        }
    }
    Ok(out)
}

fn num(kind: PlotKind, col: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| HarnessError::Schema(format!("{} plot: column `{col}` holds non-numeric value `{v}`", kind.name())))
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Shortest of `{:.0}`..`{:.4}` that reads back within 1e-9.
fn fmt(v: f64) -> String {
    for d in 0..=4 {
        let s = format!("{v:.d$}");
        if (s.parse::<f64>().unwrap_or(f64::NAN) - v).abs() < 1e-9 {
            return if s == "-0" { "0".into() } else { s };
        }
    }
    format!("{v:.4}")
}

fn px(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick step from {1, 2, 5} x 10^k giving about five ticks.
fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let m = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

#[derive(Debug, Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 1.0 };
            return Range { lo: lo - pad, hi: hi + pad };
        }
        let step = nice_step(hi - lo);
        Range {
            lo: (lo / step).floor() * step,
            hi: (hi / step).ceil() * step,
        }
    }

    fn ticks(&self) -> Vec<f64> {
        let step = nice_step(self.hi - self.lo);
        let first = (self.lo / step).ceil();
        let last = (self.hi / step + 1e-9).floor();
        (first as i64..=last as i64).map(|k| k as f64 * step).collect()
    }
}

struct Canvas {
    svg: String,
    x: Range,
    y: Range,
    legend: Vec<(String, String, Mark)>,
}

#[derive(Clone, Copy)]
enum Mark {
    Dot,
    Star,
    Line,
    Dashed,
}

impl Canvas {
    fn new(title: &str, xlabel: &str, ylabel: &str, x: Range, y: Range) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r##"<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>"##);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            px((LEFT + W - RIGHT) / 2.0),
            escape(title)
        );
        let mut c = Self {
            svg,
            x,
            y,
            legend: Vec::new(),
        };
        c.axes(xlabel, ylabel);
        c
    }

    fn sx(&self, v: f64) -> f64 {
        LEFT + (v - self.x.lo) / (self.x.hi - self.x.lo) * (W - LEFT - RIGHT)
    }

    fn sy(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y.lo) / (self.y.hi - self.y.lo) * (H - TOP - BOTTOM)
    }

    fn axes(&mut self, xlabel: &str, ylabel: &str) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#333333"/>"##,
            px(x0),
            px(y1),
            px(x1 - x0),
            px(y0 - y1)
        );
        for t in self.x.ticks() {
            let x = px(self.sx(t));
            let _ = writeln!(s, r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#333333"/>"##, px(y0), px(y0 + 5.0));
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, px(y0 + 18.0), fmt(t));
        }
        for t in self.y.ticks() {
            let y = px(self.sy(t));
            let _ = writeln!(s, r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#333333"/>"##, px(x0 - 5.0), px(x0));
            let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end" dy="4">{}</text>"#, px(x0 - 8.0), fmt(t));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px((x0 + x1) / 2.0),
            px(H - 14.0),
            escape(xlabel)
        );
        let cy = px((y0 + y1) / 2.0);
        let _ = writeln!(
            s,
            r#"<text x="18" y="{cy}" text-anchor="middle" transform="rotate(-90 18 {cy})">{}</text>"#,
            escape(ylabel)
        );
        self.svg.push_str(&s);
    }

    fn marks(&mut self, pts: &[(f64, f64)], colour: &str, mark: Mark) {
        for &(x, y) in pts {
            let (cx, cy) = (self.sx(x), self.sy(y));
            let _ = match mark {
                Mark::Star => writeln!(self.svg, r#"<path d="{}" fill="{colour}"/>"#, star(cx, cy, 8.0)),
                _ => writeln!(self.svg, r#"<circle cx="{}" cy="{}" r="3" fill="{colour}"/>"#, px(cx), px(cy)),
            };
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], colour: &str, dashed: bool) {
        if pts.len() < 2 {
            return;
        }
        let p: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", px(self.sx(x)), px(self.sy(y)))).collect();
        let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            self.svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"{dash}/>"#,
            p.join(" ")
        );
    }

    fn finish(mut self) -> String {
        let x = W - RIGHT + 14.0;
        for (i, (label, colour, mark)) in self.legend.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let _ = match mark {
                Mark::Dot => writeln!(self.svg, r#"<circle cx="{}" cy="{}" r="4" fill="{colour}"/>"#, px(x + 6.0), px(y)),
                Mark::Star => writeln!(self.svg, r#"<path d="{}" fill="{colour}"/>"#, star(x + 6.0, y, 7.0)),
                Mark::Line | Mark::Dashed => writeln!(
                    self.svg,
                    r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{colour}" stroke-width="1.5"{}/>"#,
                    px(x),
                    px(y),
                    px(x + 14.0),
                    px(y),
                    if matches!(mark, Mark::Dashed) { r#" stroke-dasharray="6 4""# } else { "" }
                ),
            };
            let _ = writeln!(self.svg, r#"<text x="{}" y="{}" dy="4">{}</text>"#, px(x + 20.0), px(y), escape(label));
        }
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn star(cx: f64, cy: f64, r: f64) -> String {
    let mut d = String::new();
    for k in 0..10 {
        let rad = if k % 2 == 0 { r } else { r * 0.45 };
        let a = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
        let _ = write!(d, "{}{},{} ", if k == 0 { "M" } else { "L" }, px(cx + rad * a.cos()), px(cy + rad * a.sin()));
    }
    d.push('Z');
    d
}

/// Groups rows by their first column, keeping first-appearance order.
fn group(rows: Vec<(String, Vec<f64>)>) -> Vec<(String, Vec<Vec<f64>>)> {
    let mut out: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (k, v) in rows {
        match out.iter_mut().find(|(g, _)| *g == k) {
            Some((_, vs)) => vs.push(v),
            None => out.push((k, vec![v])),
        }
    }
    out
}

fn colour(i: usize) -> String {
    PALETTE[i % PALETTE.len()].to_string()
}

/// Renders `tables` (rows concatenated in order) as an SVG document.
pub fn render(kind: PlotKind, tables: &[Table], title: Option<&str>) -> Result<String> {
    let rows = columns(kind, tables)?;
    let cols = kind.columns();
    let parsed = rows
        .into_iter()
        .map(|r| {
            let vals = r[1..]
                .iter()
                .zip(&cols[1..])
                .map(|(v, c)| num(kind, c, v))
                .collect::<Result<Vec<_>>>()?;
            Ok((r[0].clone(), vals))
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = group(parsed);
    let (t, xl, yl) = kind.labels();
    let title = title.unwrap_or(t);
    let all = |i: usize| groups.iter().flat_map(move |(_, vs)| vs.iter().map(move |v| v[i]));
    let svg = match kind {
        PlotKind::Scatter | PlotKind::Tradeoff | PlotKind::EpsSweep => {
            let mut c = Canvas::new(title, xl, yl, Range::of(all(0)), Range::of(all(1)));
            for (i, (name, vs)) in groups.iter().enumerate() {
                let pts: Vec<(f64, f64)> = vs.iter().map(|v| (v[0], v[1])).collect();
                let col = colour(i);
                let mark = if kind == PlotKind::Tradeoff && name.eq_ignore_ascii_case("nofrost") {
                    Mark::Star
                } else {
                    Mark::Dot
                };
                if kind != PlotKind::Scatter {
                    c.polyline(&pts, &col, false);
                }
                c.marks(&pts, &col, mark);
                c.legend.push((name.clone(), col, mark));
            }
            c.finish()
        }
        PlotKind::Histogram => {
            let r = Range::of(all(0));
            const BINS: usize = 20;
            let width = (r.hi - r.lo) / BINS as f64;
            let counts: Vec<Vec<usize>> = groups
                .iter()
                .map(|(_, vs)| {
                    let mut h = vec![0usize; BINS];
                    for v in vs {
                        let b = (((v[0] - r.lo) / width).floor().max(0.0) as usize).min(BINS - 1);
                        h[b] += 1;
                    }
                    h
                })
                .collect();
            let ymax = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
            let mut c = Canvas::new(title, xl, yl, r, Range::of([0.0, ymax].into_iter()));
            for (i, ((name, _), h)) in groups.iter().zip(&counts).enumerate() {
                let mut pts = vec![(r.lo, 0.0)];
                for (b, &n) in h.iter().enumerate() {
                    let x0 = r.lo + b as f64 * width;
                    pts.push((x0, n as f64));
                    pts.push((x0 + width, n as f64));
                }
                pts.push((r.hi, 0.0));
                let col = colour(i);
                c.polyline(&pts, &col, false);
                c.legend.push((name.clone(), col, Mark::Line));
            }
            c.finish()
        }
        PlotKind::Interpolation => {
            let ys = all(1).chain(all(2));
            let mut c = Canvas::new(title, xl, yl, Range::of(all(0)), Range::of(ys));
            for (i, (name, vs)) in groups.iter().enumerate() {
                let col = colour(i);
                let clean: Vec<(f64, f64)> = vs.iter().map(|v| (v[0], v[1])).collect();
                let robust: Vec<(f64, f64)> = vs.iter().map(|v| (v[0], v[2])).collect();
                c.polyline(&clean, &col, true);
                c.polyline(&robust, &col, false);
                c.marks(&clean, &col, Mark::Dot);
                c.marks(&robust, &col, Mark::Dot);
                c.legend.push((format!("{name} clean"), col.clone(), Mark::Dashed));
                c.legend.push((format!("{name} robust"), col, Mark::Line));
            }
            c.finish()
        }
    };
    Ok(svg)
}

/// Reads the inputs, renders and writes `out`.
pub fn plot_files(kind: PlotKind, inputs: &[&Path], filter: Option<(&str, &str)>, title: Option<&str>, out: &Path) -> Result<()> {
    let tables = inputs
        .iter()
        .map(|p| {
            let t = Table::read(p)?;
            match filter {
                Some((c, v)) => t.filter(c, v),
                None => Ok(t),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(out, render(kind, &tables, title)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(fmt(0.5), "0.5");
        assert_eq!(fmt(20.0), "20");
        assert_eq!(fmt(-0.0), "0");
        assert_eq!(fmt(0.125), "0.125");
        assert_eq!(px(-0.001), "0.00");
    }

    #[test]
    fn ticks_cover_range() {
        let r = Range::of([3.0, 97.0].into_iter());
        assert_eq!((r.lo, r.hi), (0.0, 100.0));
        assert_eq!(r.ticks(), vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        let flat = Range::of([5.0].into_iter());
        assert!(flat.lo < 5.0 && flat.hi > 5.0);
    }
}
