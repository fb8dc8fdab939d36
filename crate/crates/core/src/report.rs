//! Result persistence: JSON and CSV artifacts, static SVG plots, and a
//! `manifest.json` listing every file with its SHA-256.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Name of the manifest written by [`ReportWriter::finish`].
pub const MANIFEST: &str = "manifest.json";

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    /// Numbers use `.` as decimal separator and 17 significant digits.
    pub fn render(&self) -> String {
        match self {
            Cell::Num(x) if x.is_finite() => format!("{x:.16e}"),
            Cell::Num(x) => format!("{x}"),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
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

/// Header plus rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_error(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e.to_string())
}

/// Scatter plot with optional horizontal reference lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScatterPlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<[f64; 2]>,
    pub reference_lines: Vec<f64>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * lo.abs().max(1.0) {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl ScatterPlot {
    /// Static SVG: axes, tick labels, points and dashed reference lines.
    pub fn to_svg(&self) -> String {
        let (x0, x1) = bounds(self.points.iter().map(|p| p[0]));
        let (y0, y1) = bounds(self.points.iter().map(|p| p[1]).chain(self.reference_lines.iter().copied()));
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        // axes
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(s, r#"<path d="M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}" stroke="black" fill="none"/>"#);
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{:.4}</text>"#,
                sx(fx),
                b + 16.0,
                fx
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{:.4}</text>"#,
                l - 4.0,
                sy(fy) + 4.0,
                fy
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {:.1})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );
        for &y in &self.reference_lines {
            let _ = writeln!(
                s,
                r#"<line x1="{l:.1}" y1="{0:.2}" x2="{r:.1}" y2="{0:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
                sy(y)
            );
        }
        for p in &self.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="steelblue"/>"#, sx(p[0]), sy(p[1]));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub deterministic: bool,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Anything that can be written into a report directory.
#[derive(Debug, Clone)]
pub enum Artifact {
    Json { name: String, value: serde_json::Value },
    Csv { name: String, table: Table },
    Svg { name: String, plot: ScatterPlot },
}

impl Artifact {
    pub fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        Ok(Artifact::Json { name: name.to_string(), value: serde_json::to_value(value)? })
    }
}

/// Collects artifacts in an output directory and records their hashes.
pub struct ReportWriter {
    outdir: PathBuf,
    deterministic: bool,
    entries: Vec<ArtifactEntry>,
}

impl ReportWriter {
    pub fn new(outdir: &Path, deterministic: bool) -> Result<Self> {
        std::fs::create_dir_all(outdir)?;
        Ok(Self { outdir: outdir.to_path_buf(), deterministic, entries: Vec::new() })
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.outdir.join(name);
        std::fs::write(&path, bytes)?;
        self.entries.retain(|e| e.file != name);
        self.entries.push(ArtifactEntry { file: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(path)
    }

    pub fn write(&mut self, artifact: &Artifact) -> Result<PathBuf> {
        match artifact {
            Artifact::Json { name, value } => {
                let mut text = serde_json::to_string_pretty(value)?;
                text.push('\n');
                self.write_bytes(name, text.as_bytes())
            }
            Artifact::Csv { name, table } => self.write_bytes(name, table.to_csv()?.as_bytes()),
            Artifact::Svg { name, plot } => self.write_bytes(name, plot.to_svg().as_bytes()),
        }
    }

    /// Writes `manifest.json` with the artifacts sorted by name.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.entries.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            deterministic: self.deterministic,
            artifacts: self.entries,
        };
        let path = self.outdir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every artifact and the manifest; returns the manifest path.
pub fn write_report(results: &[Artifact], outdir: &Path, deterministic: bool) -> Result<PathBuf> {
    let mut w = ReportWriter::new(outdir, deterministic)?;
    for a in results {
        w.write(a)?;
    }
    w.finish()
}

/// Reads a manifest back.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_keep_17_digits() {
        let x = 0.1 + 0.2;
        let s = Cell::Num(x).render();
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(s, "3.0000000000000004e-1");
        assert!(!Cell::Num(-1.5).render().contains(','));
    }

    #[test]
    fn empty_report_has_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_report(&[], dir.path(), true).unwrap();
        let man = read_manifest(&m).unwrap();
        assert!(man.artifacts.is_empty());
    }

    #[test]
    fn manifest_hashes_match_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(&["eps", "err"]);
        t.push(vec![Cell::Text("1/4".into()), 0.25.into()]);
        let arts = vec![
            Artifact::Csv { name: "a.csv".into(), table: t },
            Artifact::json("b.json", &vec![1.0, 2.0]).unwrap(),
            Artifact::Svg {
                name: "c.svg".into(),
                plot: ScatterPlot { points: vec![[0.25, 3.0], [0.125, 2.0]], reference_lines: vec![2.5], ..Default::default() },
            },
        ];
        let m = write_report(&arts, dir.path(), true).unwrap();
        let man = read_manifest(&m).unwrap();
        assert_eq!(man.artifacts.len(), 3);
        for e in &man.artifacts {
            let bytes = std::fs::read(dir.path().join(&e.file)).unwrap();
            assert_eq!(sha256_hex(&bytes), e.sha256);
        }
        let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(csv, "eps,err\n1/4,2.5000000000000000e-1\n");
    }

    #[test]
    fn svg_is_static() {
        let svg = ScatterPlot { title: "a < b".into(), points: vec![[1.0, 1.0]], ..Default::default() }.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("<script") && svg.contains("a &lt; b"));
    }
}
