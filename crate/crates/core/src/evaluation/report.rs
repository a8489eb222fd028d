//! CSV tables and minimal SVG plots for the diagnostics.

use std::fmt::Write;
use std::path::Path;

use super::{DistanceStat, DivergenceTable, Projection};
use crate::dynamics::TraceRow;
use crate::error::Result;
use crate::nn::checkpoint::write_atomic;

fn num(v: f64) -> String {
    format!("{v:.9e}")
}

/// `# explained_variance_ratio,<r1>,...` followed by
/// `sequence,frame,pc1,...`; `labels[i]` names the sequence and frame of
/// projected row `i`.
pub fn projection_csv(p: &Projection, labels: &[(usize, usize)]) -> String {
    let k = p.points.cols;
    let mut out = String::from("# explained_variance_ratio");
    for r in &p.explained {
        out.push(',');
        out.push_str(&num(*r));
    }
    out.push_str("\nsequence,frame");
    for c in 1..=k {
        let _ = write!(out, ",pc{c}");
    }
    out.push('\n');
    for (i, (seq, frame)) in labels.iter().enumerate().take(p.points.rows) {
        let _ = write!(out, "{seq},{frame}");
        for v in p.points.row(i) {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    out
}

/// `sequence,seed,t,z0..,s0..`, one row per sequence and checkpoint.
pub fn divergence_csv(table: &DivergenceTable) -> String {
    let (zd, sd) = table.rows.first().map_or((0, 0), |r| (r.z.len(), r.s.len()));
    let mut out = String::from("sequence,seed,t");
    (0..zd).for_each(|j| {
        let _ = write!(out, ",z{j}");
    });
    (0..sd).for_each(|j| {
        let _ = write!(out, ",s{j}");
    });
    out.push('\n');
    for r in &table.rows {
        let _ = write!(out, "{},{},{}", r.sequence, r.seed, r.t);
        for v in r.z.iter().chain(&r.s) {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    out
}

/// `t,sequences,z_dispersion,s_dispersion,defined`; the spread columns are
/// empty and `defined` is 0 when only one sequence was drawn.
pub fn dispersion_csv(table: &DivergenceTable) -> String {
    let mut out = String::from("t,sequences,z_dispersion,s_dispersion,defined\n");
    for d in table.dispersions() {
        let cell = |v: Option<f64>| v.map(num).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            d.t,
            table.sequences,
            cell(d.z),
            cell(d.s),
            u8::from(d.z.is_some())
        );
    }
    out
}

/// `t,generated_mean,generated_variance[,train_mean,train_variance]` with
/// `t` counted from 1.
pub fn distance_csv(generated: &[DistanceStat], band: Option<&[DistanceStat]>) -> String {
    let mut out = String::from("t,generated_mean,generated_variance");
    if band.is_some() {
        out.push_str(",train_mean,train_variance");
    }
    out.push('\n');
    for (i, g) in generated.iter().enumerate() {
        let _ = write!(out, "{},{},{}", i + 1, num(g.mean), num(g.variance));
        if let Some(b) = band {
            match b.get(i) {
                Some(b) => {
                    let _ = write!(out, ",{},{}", num(b.mean), num(b.variance));
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// `t,z0..,s0..` for every warm-up and generated frame.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let (zd, sd) = rows.first().map_or((0, 0), |r| (r.z.len(), r.s.len()));
    let mut out = String::from("t");
    (0..zd).for_each(|j| {
        let _ = write!(out, ",z{j}");
    });
    (0..sd).for_each(|j| {
        let _ = write!(out, ",s{j}");
    });
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}", r.t);
        for v in r.z.iter().chain(&r.s) {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// A named set of points for a plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(series: &[Series]) -> Frame {
        let pts = series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for (px, py) in pts {
            x = (x.0.min(*px), x.1.max(*px));
            y = (y.0.min(*py), y.1.max(*py));
        }
        let pad = |r: (f64, f64)| {
            if !r.0.is_finite() {
                (0.0, 1.0)
            } else if r.1 - r.0 < 1e-12 {
                (r.0 - 0.5, r.1 + 0.5)
            } else {
                r
            }
        };
        Frame { x: pad(x), y: pad(y) }
    }

    fn map(&self, (px, py): (f64, f64)) -> (f64, f64) {
        let sx = MARGIN + (px - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN);
        let sy = HEIGHT - MARGIN - (py - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN);
        (sx, sy)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str, frame: &Frame) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {MARGIN} L{x0} {y0} L{} {y0}" stroke="black" fill="none"/>"#,
        WIDTH - MARGIN
    );
    let _ = writeln!(out, r#"<text x="{x0}" y="{}">{:.3}</text>"#, y0 + 16.0, frame.x.0);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
        WIDTH - MARGIN,
        y0 + 16.0,
        frame.x.1
    );
    let _ = writeln!(out, r#"<text x="4" y="{y0}">{:.3}</text>"#, frame.y.0);
    let _ = writeln!(out, r#"<text x="4" y="{}">{:.3}</text>"#, MARGIN + 4.0, frame.y.1);
    out
}

fn legend(out: &mut String, series: &[Series]) {
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            WIDTH - MARGIN - 110.0,
            y - 9.0,
            WIDTH - MARGIN - 96.0,
            y,
            escape(&s.name)
        );
    }
}

pub fn scatter_svg(title: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series);
    let mut out = svg_open(title, &frame);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for p in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let (x, y) = frame.map(*p);
            let _ = writeln!(
                out,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}" fill-opacity="0.7"/>"#
            );
        }
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

pub fn line_svg(title: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series);
    let mut out = svg_open(title, &frame);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .enumerate()
            .map(|(k, p)| {
                let (x, y) = frame.map(*p);
                format!("{}{x:.2} {y:.2}", if k == 0 { "M" } else { "L" })
            })
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                out,
                r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}
