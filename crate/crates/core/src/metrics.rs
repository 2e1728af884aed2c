//! Evaluation quantities, aggregation and CSV/SVG export.
//!
//! Reported reconstruction losses are per-pixel means of squared
//! differences on `[-1, 1]` pixels, unlike the raw sum the optimizer uses.
//!
//! CSV files start with a `# <schema> v<version>` line followed by a header
//! row; see `docs/formats.md`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Provenance;
use crate::error::{Error, Result};
use crate::recovery::{RecoveryTrace, TracePoint};
use crate::tensor::Tensor;

pub const RECORDS_SCHEMA: &str = "cgan-inversion-records";
pub const TRACE_SCHEMA: &str = "cgan-inversion-trace";
pub const CSV_VERSION: u32 = 1;

pub fn reconstruction_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("image".into()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// `||z - z_p||₂`.
pub fn z_recovery_error(z: &Tensor, z_p: &Tensor) -> Result<f64> {
    if z.shape() != z_p.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs probe {:?}",
            z.shape(),
            z_p.shape()
        )));
    }
    Ok(z.data()
        .iter()
        .zip(z_p.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub provenance: Provenance,
    pub reconstruction_loss: f64,
    /// Per-pixel loss before the first update.
    pub initial_loss: f64,
    /// Present exactly for generated images.
    pub z_error: Option<f64>,
    pub label_true: usize,
    pub label_decoded: usize,
    pub label_tie: bool,
    pub regularizer: bool,
    pub iterations: u64,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.label_true == self.label_decoded
    }

    pub fn check(&self) -> Result<()> {
        if !(self.reconstruction_loss >= 0.0) || !(self.initial_loss >= 0.0) {
            return Err(Error::Csv(format!("{}: negative or NaN loss", self.id)));
        }
        if self.z_error.is_some() != (self.provenance == Provenance::Generated) {
            return Err(Error::Csv(format!(
                "{}: z_error must be present exactly for generated images",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn label_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records".into()));
    }
    Ok(records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub generated: usize,
    pub real: usize,
    pub mean_reconstruction_loss: f64,
    pub mean_initial_loss: f64,
    pub accuracy: f64,
    pub mean_z_error: Option<f64>,
    pub mean_iterations: f64,
    pub config_digest: String,
}

impl AggregateReport {
    /// `loss (initial) accuracy`, e.g. `0.0123 (0.6105) 0.9985`.
    pub fn table_row(&self) -> String {
        format!(
            "{:.4} ({:.4}) {:.4}",
            self.mean_reconstruction_loss, self.mean_initial_loss, self.accuracy
        )
    }
}

/// Order-independent mean: the values are summed in sorted order.
fn mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn aggregate(records: &[EvalRecord], config_digest: &str) -> Result<AggregateReport> {
    let accuracy = label_accuracy(records)?;
    let generated = records
        .iter()
        .filter(|r| r.provenance == Provenance::Generated)
        .count();
    Ok(AggregateReport {
        count: records.len(),
        generated,
        real: records.len() - generated,
        mean_reconstruction_loss: mean(records.iter().map(|r| r.reconstruction_loss).collect())
            .unwrap_or(0.0),
        mean_initial_loss: mean(records.iter().map(|r| r.initial_loss).collect()).unwrap_or(0.0),
        accuracy,
        mean_z_error: mean(records.iter().filter_map(|r| r.z_error).collect()),
        mean_iterations: mean(records.iter().map(|r| r.iterations as f64).collect()).unwrap_or(0.0),
        config_digest: config_digest.to_string(),
    })
}

/// SHA-256 of the JSON serialization, hex encoded.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn write_versioned<T: Serialize>(path: &Path, schema: &str, rows: &[T]) -> Result<()> {
    let mut body = format!("# {schema} v{CSV_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&body).map_err(|e| Error::io(path, e))
}

fn read_versioned<T: for<'de> Deserialize<'de>>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    let expected = format!("# {schema} v{CSV_VERSION}");
    if first.trim_end() != expected {
        let found = first.trim_end();
        return if found.starts_with(&format!("# {schema} v")) {
            Err(Error::Csv(format!(
                "{}: unsupported version line {found:?}",
                path.display()
            )))
        } else {
            Err(Error::BadMagic(format!(
                "{}: expected {expected:?}, found {found:?}",
                path.display()
            )))
        };
    }
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        rows.push(row.map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?);
    }
    Ok(rows)
}

/// Columns: `id, provenance, reconstruction_loss, initial_loss, z_error,
/// label_true, label_decoded, label_tie, regularizer, iterations`.
pub fn write_records_csv(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records".into()));
    }
    write_versioned(path.as_ref(), RECORDS_SCHEMA, records)
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let records: Vec<EvalRecord> = read_versioned(path.as_ref(), RECORDS_SCHEMA)?;
    records.iter().try_for_each(EvalRecord::check)?;
    Ok(records)
}

/// Columns: `iteration, recon_mse, recon_sum, reg_term, z_error, label_correct`.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &RecoveryTrace) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::Empty("recovery trace".into()));
    }
    write_versioned(path.as_ref(), TRACE_SCHEMA, &trace.points)
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<RecoveryTrace> {
    let points: Vec<TracePoint> = read_versioned(path.as_ref(), TRACE_SCHEMA)?;
    if points.is_empty() {
        return Err(Error::Empty(format!("trace {}", path.as_ref().display())));
    }
    Ok(RecoveryTrace { points })
}

/// One named curve for [`write_svg_curves`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Plots every series as one polyline on shared axes. With `log_y` the
/// vertical axis is log10 and non-positive values are dropped.
pub fn write_svg_curves(
    path: impl AsRef<Path>,
    title: &str,
    series: &[Series],
    log_y: bool,
) -> Result<()> {
    let path = path.as_ref();
    let svg = render_svg(title, series, log_y)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

pub fn render_svg(title: &str, series: &[Series], log_y: bool) -> Result<String> {
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let usable = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0);
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|p| usable(p))
                .map(|&(x, y)| (x, ty(y)))
                .collect()
        })
        .collect();
    if pts.iter().all(Vec::is_empty) {
        return Err(Error::Empty("curves".into()));
    }
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 20.0, 40.0, 50.0);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        h - bottom,
        w - right
    );
    for (v, anchor, x, y) in [
        (x0, "start", left, h - bottom + 18.0),
        (x1, "end", w - right, h - bottom + 18.0),
    ] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{}</text>"#,
            fmt_tick(v)
        );
    }
    for v in [y0, y1] {
        let label = if log_y {
            format!("1e{v:.1}")
        } else {
            fmt_tick(v)
        };
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{label}</text>"#,
            left - 6.0,
            sy(v) + 4.0
        );
    }
    for (i, (s, p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = p
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            left + 10.0,
            top + 14.0 * (i as f64 + 1.0),
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Loss-vs-iteration series (per-pixel reconstruction MSE) from a trace.
pub fn loss_series(name: &str, trace: &RecoveryTrace) -> Series {
    Series {
        name: name.to_string(),
        points: trace
            .points
            .iter()
            .map(|p| (p.iteration as f64, p.recon_mse))
            .collect(),
    }
}
