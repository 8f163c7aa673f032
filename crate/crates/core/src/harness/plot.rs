//! Static SVG line and box plots.
//!
//! The plot area is a `<rect class="plot-area">` carrying its data ranges
//! as `data-x-min`, `data-x-max`, `data-y-min` and `data-y-max`; every
//! series is one `<polyline class="series">` whose points map linearly
//! into that rectangle, so values can be read back from the file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalkit::read_em_csv;
use crate::trainer::read_metrics;

use super::run::read_em_by_step;
use super::sweep::RUNS_HEADER;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; derived from the data when `None`.
    pub y_range: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxPlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Category label and its sample.
    pub groups: Vec<(String, Vec<f64>)>,
    pub y_range: Option<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Up to about eight round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 8.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str, f: &Frame, x_ticks: &[(f64, String)]) {
    let (w, h) = (WIDTH, HEIGHT);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let _ = writeln!(
        out,
        r#"<rect class="plot-area" x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}"/>"#,
        f.x0, f.x1, f.y0, f.y1
    );
    let _ = writeln!(
        out,
        r#"<text class="title" x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text class="y-label" x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (x, label) in x_ticks {
        let px = f.px(*x);
        let yb = HEIGHT - BOTTOM;
        let _ = writeln!(
            out,
            r#"<line x1="{px:.2}" y1="{yb}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            yb + 4.0,
            yb + 17.0,
            escape(label)
        );
    }
    for y in ticks(f.y0, f.y1) {
        let py = f.py(y);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            WIDTH - RIGHT,
            LEFT - 6.0,
            py + 4.0,
            fmt_tick(y)
        );
    }
}

impl LinePlot {
    pub fn to_svg(&self) -> Result<String> {
        let all: Vec<(f64, f64)> = self.series.iter().flat_map(|s| s.points.iter().copied()).collect();
        if all.is_empty() {
            return Err(Error::EmptyData(format!("plot {:?} has no points", self.title)));
        }
        if let Some(p) = all.iter().find(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::Argument(format!("non-finite point {p:?} in plot {:?}", self.title)));
        }
        let (x0, x1) = padded(
            all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
            all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        );
        let (y0, y1) = match self.y_range {
            Some(r) => r,
            None => padded(
                all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0),
                all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
            ),
        };
        let f = Frame { x0, x1, y0, y1 };
        let x_ticks: Vec<(f64, String)> = ticks(x0, x1).into_iter().map(|x| (x, fmt_tick(x))).collect();
        let mut out = String::new();
        header(&mut out, &self.title, &self.x_label, &self.y_label, &f, &x_ticks);
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.3},{:.3}", f.px(x), f.py(y))).collect();
            let _ = writeln!(
                out,
                r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                escape(&s.label),
                pts.join(" ")
            );
            for &(x, y) in &s.points {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.3}" cy="{:.3}" r="2.5" fill="{color}"/>"#,
                    f.px(x),
                    f.py(y)
                );
            }
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                out,
                r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
                lx + 18.0,
                lx + 24.0,
                ly + 4.0,
                escape(&s.label)
            );
        }
        out.push_str("</svg>\n");
        Ok(out)
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxPlot {
    pub fn to_svg(&self) -> Result<String> {
        let groups: Vec<&(String, Vec<f64>)> = self.groups.iter().filter(|g| !g.1.is_empty()).collect();
        if groups.is_empty() {
            return Err(Error::EmptyData(format!("plot {:?} has no values", self.title)));
        }
        let values = groups.iter().flat_map(|g| g.1.iter().copied());
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (y0, y1) = self.y_range.unwrap_or_else(|| padded(lo.min(0.0), hi));
        let f = Frame {
            x0: 0.0,
            x1: groups.len() as f64 + 1.0,
            y0,
            y1,
        };
        let x_ticks: Vec<(f64, String)> = groups.iter().enumerate().map(|(i, g)| (i as f64 + 1.0, g.0.clone())).collect();
        let mut out = String::new();
        header(&mut out, &self.title, &self.x_label, &self.y_label, &f, &x_ticks);
        let half = 0.3 * (f.px(1.0) - f.px(0.0));
        for (i, (label, v)) in groups.iter().enumerate() {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let (mn, q1, md, q3, mx) = (
                s[0],
                quantile(&s, 0.25),
                quantile(&s, 0.5),
                quantile(&s, 0.75),
                s[s.len() - 1],
            );
            let cx = f.px(i as f64 + 1.0);
            let _ = writeln!(
                out,
                r#"<g class="box" data-label="{}" data-min="{mn}" data-q1="{q1}" data-median="{md}" data-q3="{q3}" data-max="{mx}">"#,
                escape(label)
            );
            let _ = writeln!(
                out,
                r#"<line x1="{cx:.3}" y1="{:.3}" x2="{cx:.3}" y2="{:.3}" stroke="black"/>"#,
                f.py(mn),
                f.py(mx)
            );
            let _ = writeln!(
                out,
                r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#9ecae1" stroke="black"/>"##,
                cx - half,
                f.py(q3),
                2.0 * half,
                (f.py(q1) - f.py(q3)).max(0.0)
            );
            let _ = writeln!(
                out,
                r#"<line class="median" x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="black" stroke-width="2"/>"#,
                cx - half,
                f.py(md),
                cx + half,
                f.py(md)
            );
            for x in &s {
                let _ = writeln!(out, r#"<circle cx="{cx:.3}" cy="{:.3}" r="2" fill="black"/>"#, f.py(*x));
            }
            out.push_str("</g>\n");
        }
        out.push_str("</svg>\n");
        Ok(out)
    }
}

/// What to draw from which files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// EM (percent) against operand length, one series per `em.csv`.
    EmVsLength,
    /// Training and validation loss from `metrics.csv`.
    LossVsStep,
    /// EM against training step from `em_by_step.csv`, one series per length.
    EmVsStep,
    /// Spread of final EM over sweep members per length, from `runs.csv`.
    SeedBoxes,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em-length" => Ok(PlotKind::EmVsLength),
            "loss" => Ok(PlotKind::LossVsStep),
            "em-step" => Ok(PlotKind::EmVsStep),
            "seeds" => Ok(PlotKind::SeedBoxes),
            _ => Err(Error::Argument(format!(
                "unknown plot kind {s:?} (expected em-length, loss, em-step or seeds)"
            ))),
        }
    }
}

fn label_for(path: &Path, labels: &[String], i: usize) -> String {
    labels.get(i).cloned().unwrap_or_else(|| path.display().to_string())
}

/// Builds the SVG for `kind` from `inputs`. `labels` name the inputs in
/// order (file paths are used for missing labels); `lengths` restricts
/// EM-vs-step curves.
pub fn plot_files(kind: PlotKind, inputs: &[&Path], labels: &[String], lengths: &[usize]) -> Result<String> {
    if inputs.is_empty() {
        return Err(Error::EmptyData("no input files".into()));
    }
    match kind {
        PlotKind::EmVsLength => {
            let series = inputs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    Ok(Series {
                        label: label_for(p, labels, i),
                        points: read_em_csv(p)?.into_iter().map(|(l, _, em)| (l as f64, 100.0 * em)).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            LinePlot {
                title: "Exact match by length".into(),
                x_label: "digit length".into(),
                y_label: "EM accuracy (%)".into(),
                series,
                y_range: Some((0.0, 100.0)),
            }
            .to_svg()
        }
        PlotKind::LossVsStep => {
            let mut series = Vec::new();
            for (i, p) in inputs.iter().enumerate() {
                let rows = read_metrics(p)?;
                let base = label_for(p, labels, i);
                for split in ["train", "valid"] {
                    let points: Vec<(f64, f64)> = rows
                        .iter()
                        .filter(|r| r.split == split)
                        .map(|r| (r.step as f64, r.loss))
                        .collect();
                    if !points.is_empty() {
                        series.push(Series {
                            label: format!("{base} {split}"),
                            points,
                        });
                    }
                }
            }
            LinePlot {
                title: "Training loss".into(),
                x_label: "step".into(),
                y_label: "loss".into(),
                series,
                y_range: None,
            }
            .to_svg()
        }
        PlotKind::EmVsStep => {
            let mut series = Vec::new();
            for (i, p) in inputs.iter().enumerate() {
                let rows = read_em_by_step(p)?;
                let prefix = if inputs.len() > 1 {
                    format!("{} ", label_for(p, labels, i))
                } else {
                    String::new()
                };
                let mut ls: Vec<usize> = rows.iter().map(|r| r.length).collect();
                ls.sort_unstable();
                ls.dedup();
                ls.retain(|l| lengths.is_empty() || lengths.contains(l));
                for l in ls {
                    series.push(Series {
                        label: format!("{prefix}length {l}"),
                        points: rows
                            .iter()
                            .filter(|r| r.length == l)
                            .map(|r| (r.step as f64, 100.0 * r.em))
                            .collect(),
                    });
                }
            }
            LinePlot {
                title: "Exact match during training".into(),
                x_label: "step".into(),
                y_label: "EM accuracy (%)".into(),
                series,
                y_range: Some((0.0, 100.0)),
            }
            .to_svg()
        }
        PlotKind::SeedBoxes => {
            let mut by_len: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
            for p in inputs {
                let text = fs::read_to_string(p).map_err(|e| Error::io(*p, e))?;
                let mut lines = text.lines();
                if lines.next() != Some(RUNS_HEADER) {
                    return Err(Error::Parse(format!("{}: missing header {RUNS_HEADER:?}", p.display())));
                }
                for l in lines.filter(|l| !l.is_empty()) {
                    let f: Vec<&str> = l.split(',').collect();
                    let bad = || Error::Parse(format!("{}: bad row {l:?}", p.display()));
                    let (len, em): (usize, f64) = match f.as_slice() {
                        [_, _, len, em, _] => (len.parse().map_err(|_| bad())?, em.parse().map_err(|_| bad())?),
                        _ => return Err(bad()),
                    };
                    by_len.entry(len).or_default().push(100.0 * em);
                }
            }
            BoxPlot {
                title: "Exact match across seeds".into(),
                x_label: "digit length".into(),
                y_label: "EM accuracy (%)".into(),
                groups: by_len.into_iter().map(|(l, v)| (l.to_string(), v)).collect(),
                y_range: Some((0.0, 100.0)),
            }
            .to_svg()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_cover_range() {
        assert_eq!(ticks(0.0, 100.0), vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        assert_eq!(ticks(1.0, 8.0), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn empty_plots_are_rejected() {
        let p = LinePlot {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                label: "a".into(),
                points: vec![],
            }],
            y_range: None,
        };
        assert!(matches!(p.to_svg(), Err(Error::EmptyData(_))));
    }

    #[test]
    fn quartiles_interpolate() {
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
    }
}
