//! Static SVG line charts and heatmaps on a fixed 960×540 canvas.
//!
//! Output depends only on the table contents and the plot spec; every
//! coordinate is printed with two decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{Cell, Table, TableError};

pub const WIDTH: f64 = 960.0;
pub const HEIGHT: f64 = 540.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
/// Points per polyline and cells per heatmap axis beyond which rows are thinned.
const MAX_POINTS: usize = 2_000;
const MAX_CELLS: usize = 240;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

#[derive(Debug, Error)]
pub enum SvgError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlotSpec {
    /// One polyline per `ys` column, repeated per distinct `group` value.
    Line {
        title: String,
        x: String,
        ys: Vec<String>,
        #[serde(default)]
        group: Option<String>,
        #[serde(default)]
        x_unit: String,
        #[serde(default)]
        y_unit: String,
    },
    /// `z` over the (`x`, `y`) lattice of distinct values.
    Heatmap {
        title: String,
        x: String,
        y: String,
        z: String,
        #[serde(default)]
        x_unit: String,
        #[serde(default)]
        y_unit: String,
    },
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axis_label(name: &str, unit: &str) -> String {
    if unit.is_empty() {
        name.to_owned()
    } else {
        format!("{name} [{unit}]")
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0".to_owned()
    } else if !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_owned()
    }
}

#[derive(Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl IntoIterator<Item = f64>) -> Option<Range> {
        let mut r: Option<Range> = None;
        for v in values.into_iter().filter(|v| v.is_finite()) {
            r = Some(match r {
                None => Range { lo: v, hi: v },
                Some(r) => Range {
                    lo: r.lo.min(v),
                    hi: r.hi.max(v),
                },
            });
        }
        r.map(|r| {
            if r.hi > r.lo {
                r
            } else {
                let pad = if r.lo == 0.0 { 1.0 } else { 0.5 * r.lo.abs() };
                Range {
                    lo: r.lo - pad,
                    hi: r.hi + pad,
                }
            }
        })
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn px(r: &Range, v: f64) -> f64 {
    LEFT + r.frac(v) * (WIDTH - LEFT - RIGHT)
}

fn py(r: &Range, v: f64) -> f64 {
    HEIGHT - BOTTOM - r.frac(v) * (HEIGHT - TOP - BOTTOM)
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n\
         <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n\
         <text x=\"{tx:.2}\" y=\"30.00\" font-size=\"18\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"{l:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"#000000\"/>\n\
         <line x1=\"{l:.2}\" y1=\"{t:.2}\" x2=\"{l:.2}\" y2=\"{b:.2}\" stroke=\"#000000\"/>\n\
         <text x=\"{tx:.2}\" y=\"{xl:.2}\" font-size=\"14\" text-anchor=\"middle\">{xlab}</text>\n\
         <text x=\"20.00\" y=\"{yl:.2}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 20.00 {yl:.2})\">{ylab}</text>\n",
        w = WIDTH,
        h = HEIGHT,
        tx = LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        title = escape(title),
        l = LEFT,
        r = WIDTH - RIGHT,
        t = TOP,
        b = HEIGHT - BOTTOM,
        xl = HEIGHT - 20.0,
        yl = TOP + (HEIGHT - TOP - BOTTOM) / 2.0,
        xlab = escape(x_label),
        ylab = escape(y_label),
    );
}

fn ticks(out: &mut String, xr: &Range, yr: &Range) {
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = xr.lo + f * (xr.hi - xr.lo);
        let x = px(xr, xv);
        let b = HEIGHT - BOTTOM;
        let _ = writeln!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{b:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#000000\"/>\n<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            b + 5.0,
            b + 20.0,
            tick_label(xv)
        );
        let yv = yr.lo + f * (yr.hi - yr.lo);
        let y = py(yr, yv);
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{LEFT:.2}\" y2=\"{y:.2}\" stroke=\"#000000\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0,
            tick_label(yv)
        );
    }
}

fn no_data(out: &mut String) {
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"16\" text-anchor=\"middle\" fill=\"#666666\">no data</text>",
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        TOP + (HEIGHT - TOP - BOTTOM) / 2.0
    );
}

/// Indices `0, s, 2s, …` plus the last one, keeping at most about `max` entries.
fn thin(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len.div_ceil(max);
    let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
    if idx.last() != Some(&(len - 1)) {
        idx.push(len - 1);
    }
    idx
}

fn group_key(c: &Cell) -> String {
    match c {
        Cell::Num(x) => format!("{x:?}"),
        Cell::Int(i) => i.to_string(),
        Cell::UInt(u) => u.to_string(),
        Cell::Text(s) => s.clone(),
    }
}

fn render_line(
    table: &Table,
    title: &str,
    x: &str,
    ys: &[String],
    group: Option<&str>,
    x_unit: &str,
    y_unit: &str,
) -> Result<String, SvgError> {
    let xs = table.numeric_column(x)?;
    let cols: Vec<Vec<f64>> = ys.iter().map(|y| table.numeric_column(y)).collect::<Result<_, _>>()?;
    // Group rows in first-appearance order.
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    match group {
        Some(g) => {
            let gi = table.column_index(g)?;
            let mut pos: BTreeMap<String, usize> = BTreeMap::new();
            for (r, row) in table.rows().iter().enumerate() {
                let key = group_key(&row[gi]);
                let slot = *pos.entry(key.clone()).or_insert_with(|| {
                    groups.push((format!("{g}={key}"), Vec::new()));
                    groups.len() - 1
                });
                groups[slot].1.push(r);
            }
        }
        None => groups.push((String::new(), (0..table.len()).collect())),
    }
    let y_name = ys.join(", ");
    let mut out = String::new();
    frame(&mut out, title, &axis_label(x, x_unit), &axis_label(&y_name, y_unit));
    let xr = Range::of(xs.iter().copied());
    let yr = Range::of(cols.iter().flatten().copied());
    let (Some(xr), Some(yr)) = (xr, yr) else {
        no_data(&mut out);
        out.push_str("</svg>\n");
        return Ok(out);
    };
    ticks(&mut out, &xr, &yr);
    let mut series = 0usize;
    for (label, rows) in &groups {
        for (yi, y) in ys.iter().enumerate() {
            let color = PALETTE[series % PALETTE.len()];
            let mut pts = String::new();
            for &k in &thin(rows.len(), MAX_POINTS) {
                let r = rows[k];
                let (xv, yv) = (xs[r], cols[yi][r]);
                if xv.is_finite() && yv.is_finite() {
                    let _ = write!(pts, "{:.2},{:.2} ", px(&xr, xv), py(&yr, yv));
                }
            }
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.trim_end()
            );
            let name = if label.is_empty() { y.clone() } else { format!("{y} ({label})") };
            let ly = TOP + 10.0 + 16.0 * series as f64;
            let lx = WIDTH - RIGHT + 10.0;
            let _ = writeln!(
                out,
                "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>",
                lx + 16.0,
                lx + 20.0,
                ly + 3.0,
                escape(&name)
            );
            series += 1;
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Blue to white to red over `[0, 1]`.
fn color(f: f64) -> String {
    let f = f.clamp(0.0, 1.0);
    let (r, g, b) = if f < 0.5 {
        let s = f / 0.5;
        (59.0 + s * (247.0 - 59.0), 76.0 + s * (247.0 - 76.0), 192.0 + s * (247.0 - 192.0))
    } else {
        let s = (f - 0.5) / 0.5;
        (247.0 + s * (180.0 - 247.0), 247.0 + s * (4.0 - 247.0), 247.0 + s * (38.0 - 247.0))
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

fn distinct_sorted(v: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    d.sort_by(f64::total_cmp);
    d.dedup();
    d
}

fn render_heatmap(
    table: &Table,
    title: &str,
    x: &str,
    y: &str,
    z: &str,
    x_unit: &str,
    y_unit: &str,
) -> Result<String, SvgError> {
    let (xs, ys, zs) = (table.numeric_column(x)?, table.numeric_column(y)?, table.numeric_column(z)?);
    let mut out = String::new();
    frame(&mut out, title, &axis_label(x, x_unit), &axis_label(y, y_unit));
    let dx = distinct_sorted(&xs);
    let dy = distinct_sorted(&ys);
    let zr = Range::of(zs.iter().copied());
    let (Some(xr), Some(_), Some(zr)) = (Range::of(dx.iter().copied()), Range::of(dy.iter().copied()), zr) else {
        no_data(&mut out);
        out.push_str("</svg>\n");
        return Ok(out);
    };
    let kx: Vec<f64> = thin(dx.len(), MAX_CELLS).into_iter().map(|i| dx[i]).collect();
    let ky: Vec<f64> = thin(dy.len(), MAX_CELLS).into_iter().map(|i| dy[i]).collect();
    let col_of: BTreeMap<u64, usize> = kx.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
    let row_of: BTreeMap<u64, usize> = ky.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
    let mut grid = vec![vec![f64::NAN; kx.len()]; ky.len()];
    for ((xv, yv), zv) in xs.iter().zip(&ys).zip(&zs) {
        if let (Some(&c), Some(&r)) = (col_of.get(&xv.to_bits()), row_of.get(&yv.to_bits())) {
            grid[r][c] = *zv;
        }
    }
    // Cells are laid out by rank, so uneven sweep values get equal bands.
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let (cw, ch) = (pw / kx.len() as f64, ph / ky.len() as f64);
    for (r, row) in grid.iter().enumerate() {
        for (c, &zv) in row.iter().enumerate() {
            if !zv.is_finite() {
                continue;
            }
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                LEFT + c as f64 * cw,
                HEIGHT - BOTTOM - (r + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05,
                color(zr.frac(zv))
            );
        }
    }
    for (i, v) in [(0, xr.lo), (4, xr.hi)] {
        let xp = LEFT + i as f64 / 4.0 * pw;
        let _ = writeln!(
            out,
            "<text x=\"{xp:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            HEIGHT - BOTTOM + 20.0,
            tick_label(v)
        );
    }
    for (r, v) in ky.iter().enumerate().filter(|(r, _)| ky.len() <= 12 || r % (ky.len() / 6) == 0) {
        let yp = HEIGHT - BOTTOM - (r as f64 + 0.5) * ch;
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            LEFT - 8.0,
            yp + 4.0,
            tick_label(*v)
        );
    }
    // Color bar.
    let bx = WIDTH - RIGHT + 30.0;
    for i in 0..50 {
        let f = i as f64 / 49.0;
        let _ = writeln!(
            out,
            "<rect x=\"{bx:.2}\" y=\"{:.2}\" width=\"20.00\" height=\"{:.2}\" fill=\"{}\"/>",
            HEIGHT - BOTTOM - (i + 1) as f64 * ph / 50.0,
            ph / 50.0 + 0.05,
            color(f)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>",
        bx + 25.0,
        HEIGHT - BOTTOM,
        tick_label(zr.lo),
        bx + 25.0,
        TOP + 10.0,
        tick_label(zr.hi),
        bx,
        TOP - 8.0,
        escape(z)
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders `spec` over `table`; errors when a named column is missing.
pub fn render_svg(table: &Table, spec: &PlotSpec) -> Result<String, SvgError> {
    match spec {
        PlotSpec::Line {
            title,
            x,
            ys,
            group,
            x_unit,
            y_unit,
        } => render_line(table, title, x, ys, group.as_deref(), x_unit, y_unit),
        PlotSpec::Heatmap {
            title,
            x,
            y,
            z,
            x_unit,
            y_unit,
        } => render_heatmap(table, title, x, y, z, x_unit, y_unit),
    }
}

pub fn write_svg(table: &Table, spec: &PlotSpec, path: &Path) -> Result<(), SvgError> {
    std::fs::write(path, render_svg(table, spec)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(ys: &[&str]) -> PlotSpec {
        PlotSpec::Line {
            title: "Mean inventories".into(),
            x: "t".into(),
            ys: ys.iter().map(|s| s.to_string()).collect(),
            group: None,
            x_unit: "T".into(),
            y_unit: "shares".into(),
        }
    }

    fn sample() -> Table {
        let mut t = Table::new(&["t", "a", "b", "ratio"]);
        for k in 0..=10 {
            let x = k as f64 / 10.0;
            for r in [0.5, 1.0, 2.0] {
                t.push(vec![x.into(), (x * r).into(), (1.0 - x).into(), r.into()]).unwrap();
            }
        }
        t
    }

    #[test]
    fn two_line_chart() {
        let s = render_svg(&sample(), &line(&["a", "b"])).unwrap();
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("width=\"960\" height=\"540\""));
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("t [T]") && s.contains("a, b [shares]"));
    }

    #[test]
    fn output_is_deterministic() {
        let spec = PlotSpec::Heatmap {
            title: "difference".into(),
            x: "t".into(),
            y: "ratio".into(),
            z: "a".into(),
            x_unit: String::new(),
            y_unit: String::new(),
        };
        let a = render_svg(&sample(), &spec).unwrap();
        assert_eq!(a, render_svg(&sample(), &spec).unwrap());
        assert_eq!(a.matches("<rect").count(), 1 + 33 + 50);
    }

    #[test]
    fn grouped_lines() {
        let spec = PlotSpec::Line {
            title: "sweep".into(),
            x: "t".into(),
            ys: vec!["a".into()],
            group: Some("ratio".into()),
            x_unit: String::new(),
            y_unit: String::new(),
        };
        let s = render_svg(&sample(), &spec).unwrap();
        assert_eq!(s.matches("<polyline").count(), 3);
        assert!(s.contains("a (ratio=0.5)"));
    }

    #[test]
    fn empty_table_says_no_data() {
        let t = Table::new(&["t", "a"]);
        let s = render_svg(&t, &line(&["a"])).unwrap();
        assert!(s.contains("no data") && s.contains("<line"));
    }

    #[test]
    fn unknown_column_is_an_error() {
        let e = render_svg(&sample(), &line(&["missing"])).unwrap_err();
        assert!(e.to_string().contains("missing"));
    }

    #[test]
    fn labels_are_escaped() {
        assert_eq!(escape("a<b&c"), "a&lt;b&amp;c");
        assert_eq!(tick_label(0.25), "0.25");
        assert_eq!(tick_label(200.0), "200");
        assert_eq!(tick_label(1e-6), "1.00e-6");
    }
}
