//! Minimal SVG line charts.

use std::fmt::Write;

use crate::error::{Error, Result};

use super::table::Table;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChartOptions {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
}

const W: f64 = 720.0;
const H: f64 = 480.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 160.0, 40.0, 60.0); // left, right, top, bottom
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Series from table columns, optionally split by a group column. Rows
/// with a non-finite coordinate (or a non-positive one on a log axis) are
/// dropped; points are sorted by `x`.
pub fn series_from_table(
    t: &Table,
    x: &str,
    ys: &[String],
    group: Option<&str>,
    opts: &ChartOptions,
) -> Result<Vec<Series>> {
    let missing = |c: &str| Error::Validation(format!("column '{c}' not found in {}", t.name));
    let xs = t.column(x).ok_or_else(|| missing(x))?;
    let ys: Vec<String> = if ys.is_empty() {
        t.columns
            .iter()
            .filter(|c| c.as_str() != x && Some(c.as_str()) != group)
            .filter(|c| t.column(c).is_some_and(|v| v.iter().any(|a| a.is_finite())))
            .cloned()
            .collect()
    } else {
        ys.to_vec()
    };
    let groups = match group {
        Some(g) => Some(t.text_column(g).ok_or_else(|| missing(g))?),
        None => None,
    };
    let keep = |a: f64, log: bool| a.is_finite() && (!log || a > 0.0);
    let mut out: Vec<Series> = Vec::new();
    for y in &ys {
        let vs = t.column(y).ok_or_else(|| missing(y))?;
        for (i, (&a, &b)) in xs.iter().zip(&vs).enumerate() {
            if !(keep(a, opts.log_x) && keep(b, opts.log_y)) {
                continue;
            }
            let label = match &groups {
                Some(g) => format!("{y} [{}]", g[i]),
                None => y.clone(),
            };
            match out.iter_mut().find(|s| s.label == label) {
                Some(s) => s.points.push((a, b)),
                None => out.push(Series { label, points: vec![(a, b)] }),
            }
        }
    }
    for s in &mut out {
        s.points.sort_by(|p, q| p.0.total_cmp(&q.0));
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("nothing to plot from {}", t.name)));
    }
    Ok(out)
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= n as f64)
        .unwrap_or(10.0 * mag);
    let mut v = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while v <= hi + 1e-9 * step {
        out.push(v);
        v += step;
    }
    out
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(vals: impl Iterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = vals
            .map(|v| if log { v.log10() } else { v })
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        Axis { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let u = if self.log { v.log10() } else { v };
        (u - self.lo) / (self.hi - self.lo)
    }

    /// Tick positions in data units with labels.
    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            (self.lo as i32..=self.hi as i32)
                .map(|k| (10f64.powi(k), format!("1e{k}")))
                .collect()
        } else {
            nice_ticks(self.lo, self.hi, 6)
                .into_iter()
                .map(|v| (v, format!("{v:.3}")))
                .collect()
        }
    }
}

pub fn line_chart(series: &[Series], opts: &ChartOptions) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (W - ml - mr, H - mt - mb);
    let ax = Axis::new(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), opts.log_x);
    let ay = Axis::new(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), opts.log_y);
    let px = |v: f64| ml + ax.frac(v) * pw;
    let py = |v: f64| mt + (1.0 - ay.frac(v)) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        ml + pw / 2.0,
        esc(&opts.title)
    );
    for (v, l) in ax.ticks() {
        let x = px(v);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{mt}" x2="{x:.2}" y2="{}" stroke="#e5e5e5"/>"##, mt + ph);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{l}</text>"#, mt + ph + 18.0);
    }
    for (v, l) in ay.ticks() {
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{ml}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#e5e5e5"/>"##, ml + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{l}</text>"#, ml - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        H - 15.0,
        esc(&opts.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        esc(&opts.y_label)
    );
    for (i, se) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = se.points.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.6" points="{}"/>"#, pts.join(" "));
        for p in &se.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"/>"#, px(p.0), py(p.1));
        }
        let ly = mt + 14.0 + 18.0 * i as f64;
        let lx = ml + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, esc(&se.label));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli_harness::table::Cell;

    #[test]
    fn chart_contains_each_series() {
        let mut t = Table::new("t", &["x", "a", "g"]);
        for (x, g) in [(1e-3, "p"), (1e-2, "p"), (1e-1, "p"), (1e-2, "q"), (1e-1, "q")] {
            t.push(vec![Cell::Num(x), Cell::Num(x * x), g.into()]);
        }
        let o = ChartOptions {
            log_x: true,
            log_y: true,
            ..ChartOptions::default()
        };
        let s = series_from_table(&t, "x", &["a".into()], Some("g"), &o).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].points.len(), 3);
        let svg = line_chart(&s, &o);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("1e-3"));
        assert!(series_from_table(&t, "nope", &[], None, &o).is_err());
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 1.0, 5);
        assert!(t.first().unwrap().abs() < 1e-12 && (t.last().unwrap() - 1.0).abs() < 1e-12);
    }
}
