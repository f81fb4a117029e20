//! Artifact writers: CSV tables, gnuplot `.dat` columns, SVG line plots.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::CliError;

pub struct Output {
    dir: PathBuf,
    svg: bool,
    written: Vec<String>,
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Axes {
    pub log_x: bool,
    pub log_y: bool,
}

impl Output {
    pub fn new(dir: &Path, svg: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), svg, written: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    /// Opens `name` for writing and records it as an artifact.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        self.write_with(name, |w| w.write_all(body.as_bytes()))
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
        self.write_with(name, |w| {
            writeln!(w, "{}", header.join(","))?;
            for r in rows {
                let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", cells.join(","))?;
            }
            Ok(())
        })
    }

    /// Whitespace columns with a `#` header; `None` rows become blank lines (gnuplot block breaks).
    pub fn dat(&mut self, name: &str, header: &[&str], rows: &[Option<Vec<f64>>]) -> Result<(), CliError> {
        self.write_with(name, |w| {
            writeln!(w, "# {}", header.join(" "))?;
            for r in rows {
                match r {
                    Some(r) => {
                        let cells: Vec<String> = r.iter().map(|v| format!("{v:.12e}")).collect();
                        writeln!(w, "{}", cells.join(" "))?;
                    }
                    None => writeln!(w)?,
                }
            }
            Ok(())
        })
    }

    /// Line plot; skipped when SVG output is off.
    pub fn plot(&mut self, name: &str, title: &str, labels: (&str, &str), axes: Axes, series: &[Series]) -> Result<(), CliError> {
        if !self.svg {
            return Ok(());
        }
        let body = svg_plot(title, labels, axes, series);
        self.text(name, &body)
    }
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub fn svg_plot(title: &str, labels: (&str, &str), axes: Axes, series: &[Series]) -> String {
    let tx = |v: f64| if axes.log_x { v.log10() } else { v };
    let ty = |v: f64| if axes.log_y { v.log10() } else { v };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .map(|&(x, y)| (tx(x), ty(y)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-300 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-300 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let tick = |v: f64, log: bool| if log { format!("1e{v:.1}") } else { format!("{v:.3}") };

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for (v, anchor_x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(s, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, tick(v, axes.log_x));
    }
    for (v, anchor_y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, anchor_y + 4.0, tick(v, axes.log_y));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(labels.0));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(labels.1)
    );
    for (k, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        for &(x, y) in p {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * (k as f64 + 1.0),
            escape(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_tables_and_records_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::new(dir.path(), true).unwrap();
        out.csv("a.csv", &["x", "y"], &[vec![1.0, 2.5], vec![3.0, -1.0]]).unwrap();
        out.dat("a.dat", &["x", "y"], &[Some(vec![1.0, 2.0]), None, Some(vec![3.0, 4.0])]).unwrap();
        let series = [Series { label: "a<b", points: vec![(1.0, 1.0), (10.0, 0.1)] }];
        out.plot("a.svg", "t", ("x", "y"), Axes { log_x: true, log_y: true }, &series).unwrap();
        assert_eq!(out.written(), ["a.csv", "a.dat", "a.svg"]);
        let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(csv, "x,y\n1,2.5\n3,-1\n");
        let dat = std::fs::read_to_string(dir.path().join("a.dat")).unwrap();
        assert_eq!(dat.lines().nth(2), Some(""));
        let svg = std::fs::read_to_string(dir.path().join("a.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("a&lt;b") && svg.contains("polyline"));
    }

    #[test]
    fn svg_can_be_disabled() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::new(dir.path(), false).unwrap();
        out.plot("p.svg", "t", ("x", "y"), Axes::default(), &[]).unwrap();
        assert!(out.written().is_empty());
    }
}
