//! Rectangular result tables with CSV output and inline SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use super::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Text(_) => None,
        }
    }

    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v:e}"),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ReportTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(CliError::Invalid(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[j]).collect())
    }

    /// Numeric values of a column; text cells are an error.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)
            .ok_or_else(|| CliError::Invalid(format!("no column `{name}`")))?
            .into_iter()
            .map(|c| c.as_f64().ok_or_else(|| CliError::Invalid(format!("column `{name}` is not numeric"))))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn extent(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }
}

fn open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n\
         <text x=\"12\" y=\"{}\" font-size=\"11\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"{PAD}\" y=\"{}\" font-size=\"9\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{PAD}\" font-size=\"9\" text-anchor=\"end\">{:.3}</text>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 8.0,
        escape(xlabel),
        H / 2.0,
        H / 2.0,
        escape(ylabel),
        H - PAD + 12.0,
        f.x.0,
        W - PAD,
        H - PAD + 12.0,
        f.x.1,
        PAD - 2.0,
        H - PAD,
        f.y.0,
        PAD - 2.0,
        f.y.1,
    );
    s
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Scatter plot of one or more named point series.
pub fn svg_scatter(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, &[f64], &[f64])]) -> String {
    let f = Frame {
        x: extent(series.iter().flat_map(|s| s.1.iter().copied())),
        y: extent(series.iter().flat_map(|s| s.2.iter().copied())),
    };
    let mut s = open(title, xlabel, ylabel, &f);
    for (k, (name, xs, ys)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        for (x, y) in xs.iter().zip(ys.iter()) {
            if x.is_finite() && y.is_finite() {
                let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{c}\" fill-opacity=\"0.6\"/>", f.px(*x), f.py(*y));
            }
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{c}\">{}</text>", W - PAD - 90.0, PAD + 12.0 * k as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of one or more named series sharing an x axis.
pub fn svg_lines(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], series: &[(&str, &[f64])]) -> String {
    let f = Frame {
        x: extent(xs.iter().copied()),
        y: extent(series.iter().flat_map(|s| s.1.iter().copied())),
    };
    let mut s = open(title, xlabel, ylabel, &f);
    for (k, (name, ys)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y)))
            .collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{c}\">{}</text>", W - PAD - 90.0, PAD + 12.0 * k as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Bin counts over `[lo, hi]`; the last bin is closed.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 || !(hi > lo) {
        return counts;
    }
    for &v in values {
        if v.is_finite() && v >= lo && v <= hi {
            let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
    }
    counts
}

/// Overlaid histograms on shared bins.
pub fn svg_histograms(title: &str, xlabel: &str, series: &[(&str, &[f64])], bins: usize) -> String {
    let (lo, hi) = extent(series.iter().flat_map(|s| s.1.iter().copied()));
    let counts: Vec<Vec<usize>> = series.iter().map(|s| histogram(s.1, lo, hi, bins)).collect();
    let top = counts.iter().flatten().copied().max().unwrap_or(1).max(1);
    let f = Frame {
        x: (lo, hi),
        y: (0.0, top as f64),
    };
    let mut s = open(title, xlabel, "count", &f);
    let width = (W - 2.0 * PAD) / bins.max(1) as f64;
    for (k, (name, _)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        for (b, &n) in counts[k].iter().enumerate() {
            let y = f.py(n as f64);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{width:.2}\" height=\"{:.2}\" fill=\"{c}\" fill-opacity=\"0.45\"/>",
                PAD + b as f64 * width,
                H - PAD - y
            );
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{c}\">{}</text>", W - PAD - 90.0, PAD + 12.0 * k as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}
