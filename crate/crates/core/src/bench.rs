//! Accuracy, latency and size measurement plus report rendering.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::frame::{ClassLabel, Frame, Modality};

pub type ModelError = Box<dyn std::error::Error + Send + Sync>;

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_ITERATIONS: usize = 100;
pub const TEST_BATCH: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error("model expects {model} input but the data is {data}")]
    ModalityMismatch { model: Modality, data: Modality },
    #[error("need at least 10 timed iterations, got {0}")]
    TooFewIterations(usize),
    #[error("no sample frames supplied")]
    NoFrames,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("model returned {got} outputs for {expected} inputs")]
    OutputCount { got: usize, expected: usize },
    #[error("model failure: {0}")]
    Model(#[source] ModelError),
    #[error("i/o on {path}: {message}")]
    Io { path: String, message: String },
    #[error("report needs at least one row")]
    NoRows,
    #[error("rows file line {line}: {message}")]
    Rows { line: usize, message: String },
}

/// Anything that maps frames to spill probabilities.
pub trait SpillClassifier {
    fn name(&self) -> &str;
    fn modality(&self) -> Modality;
    /// Sigmoid outputs, one per frame, in input order.
    fn predict(&self, frames: &[Frame]) -> Result<Vec<f32>, ModelError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: ClassLabel, predicted: ClassLabel) {
        match (truth, predicted) {
            (ClassLabel::Spill, ClassLabel::Spill) => self.tp += 1,
            (ClassLabel::NoSpill, ClassLabel::NoSpill) => self.tn += 1,
            (ClassLabel::NoSpill, ClassLabel::Spill) => self.fp += 1,
            (ClassLabel::Spill, ClassLabel::NoSpill) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_test: usize,
    pub confusion: Confusion,
}

/// Score labelled frames in batches of `batch`, spill iff p >= 0.5.
pub fn evaluate_frames(
    model: &dyn SpillClassifier,
    samples: &[(Frame, ClassLabel)],
    batch: usize,
) -> Result<EvalReport, BenchError> {
    if batch == 0 {
        return Err(BenchError::ZeroBatch);
    }
    if samples.is_empty() {
        return Err(BenchError::EmptyTestSplit);
    }
    let mut confusion = Confusion::default();
    for chunk in samples.chunks(batch) {
        if let Some((f, _)) = chunk.iter().find(|(f, _)| f.modality != model.modality()) {
            return Err(BenchError::ModalityMismatch {
                model: model.modality(),
                data: f.modality,
            });
        }
        let frames: Vec<Frame> = chunk.iter().map(|(f, _)| f.clone()).collect();
        let probs = model.predict(&frames).map_err(BenchError::Model)?;
        if probs.len() != frames.len() {
            return Err(BenchError::OutputCount {
                got: probs.len(),
                expected: frames.len(),
            });
        }
        for ((_, truth), p) in chunk.iter().zip(probs) {
            confusion.record(*truth, ClassLabel::from_confidence(p));
        }
    }
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        n_test: confusion.total(),
        confusion,
    })
}

/// Accuracy over the manifest's test split.
pub fn evaluate_accuracy(
    model: &dyn SpillClassifier,
    manifest: &DatasetManifest,
    batch: usize,
) -> Result<EvalReport, BenchError> {
    let test: Vec<_> = manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(BenchError::EmptyTestSplit);
    }
    if let Some(e) = test.iter().find(|e| e.modality != model.modality()) {
        return Err(BenchError::ModalityMismatch {
            model: model.modality(),
            data: e.modality,
        });
    }
    let mut samples = Vec::with_capacity(test.len());
    for e in test {
        let path = manifest.absolute_path(e);
        let frame = Frame::load_png(&path, e.modality).map_err(|err| BenchError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        })?;
        samples.push((frame, e.class_label));
    }
    evaluate_frames(model, &samples, batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub iterations: usize,
    pub warmup: usize,
    pub hardware_label: String,
}

impl LatencyStats {
    /// Summary of retained per-iteration timings (sample std, nearest-rank
    /// percentiles).
    pub fn from_samples(samples: &[f64], warmup: usize, hardware_label: impl Into<String>) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
            iterations: n,
            warmup,
            hardware_label: hardware_label.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatencyRun {
    pub stats: LatencyStats,
    /// Wall time of every retained iteration, in order.
    pub samples_ms: Vec<f64>,
}

impl LatencyRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,ms\n");
        for (i, ms) in self.samples_ms.iter().enumerate() {
            let _ = writeln!(out, "{},{:.6}", i + 1, ms);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), BenchError> {
        std::fs::write(path, self.to_csv()).map_err(|e| BenchError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Single-image latency: `warmup` untimed runs, then `iterations` timed
/// runs of predict + threshold, cycling through `frames`.
pub fn measure_latency(
    model: &dyn SpillClassifier,
    frames: &[Frame],
    warmup: usize,
    iterations: usize,
) -> Result<LatencyRun, BenchError> {
    if iterations < 10 {
        return Err(BenchError::TooFewIterations(iterations));
    }
    if frames.is_empty() {
        return Err(BenchError::NoFrames);
    }
    if let Some(f) = frames.iter().find(|f| f.modality != model.modality()) {
        return Err(BenchError::ModalityMismatch {
            model: model.modality(),
            data: f.modality,
        });
    }
    let run_once = |i: usize| -> Result<f64, BenchError> {
        let frame = std::slice::from_ref(&frames[i % frames.len()]);
        let start = Instant::now();
        let probs = model.predict(frame).map_err(BenchError::Model)?;
        let label = probs.first().map(|p| ClassLabel::from_confidence(*p));
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(label);
        Ok(elapsed)
    };
    for i in 0..warmup {
        run_once(i)?;
    }
    let samples: Vec<f64> = (0..iterations).map(|i| run_once(warmup + i)).collect::<Result<_, _>>()?;
    Ok(LatencyRun {
        stats: LatencyStats::from_samples(&samples, warmup, hardware_label()),
        samples_ms: samples,
    })
}

/// CPU model name from the OS, or the target triple when unavailable.
pub fn hardware_label() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS))
}

/// On-disk size in MB (10^6 bytes). Returns a warning for empty files.
pub fn model_size(weights_path: &Path) -> Result<(f64, Option<String>), BenchError> {
    let meta = std::fs::metadata(weights_path).map_err(|e| BenchError::Io {
        path: weights_path.display().to_string(),
        message: e.to_string(),
    })?;
    let mb = meta.len() as f64 / 1e6;
    let warning = (meta.len() == 0).then(|| format!("{} is empty", weights_path.display()));
    Ok((mb, warning))
}

/// Relative deviation of `measured_mb` from a reference size; used as a
/// sanity band, never as a gate.
pub fn size_band(measured_mb: f64, reference_mb: f64, tolerance: f64) -> (f64, bool) {
    let rel = (measured_mb - reference_mb) / reference_mb;
    (rel, rel.abs() <= tolerance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub label: String,
    pub test_accuracy: f64,
    pub demo_accuracy: Option<f64>,
    pub model_size_mb: Option<f64>,
    pub inference_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 4] = ["% Test", "Demo Accuracy", "Model Size", "Inference Time"];

fn fmt_percent(fraction: f64) -> String {
    let s = format!("{:.2}", fraction * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

fn fmt_size(mb: f64) -> String {
    if mb >= 1000.0 {
        format!("{:.1} GB", mb / 1000.0)
    } else {
        format!("{mb:.1} MB")
    }
}

fn fmt_ms(ms: f64) -> String {
    if ms >= 10.0 {
        format!("{ms:.0} ms")
    } else {
        format!("{ms:.1} ms")
    }
}

/// Display cells of a row, `-` for anything missing.
pub fn row_cells(row: &BenchmarkRow) -> [String; 5] {
    let dash = || "-".to_string();
    [
        row.label.clone(),
        fmt_percent(row.test_accuracy),
        row.demo_accuracy.map(fmt_percent).unwrap_or_else(dash),
        row.model_size_mb.map(fmt_size).unwrap_or_else(dash),
        row.inference_ms.map(fmt_ms).unwrap_or_else(dash),
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render a Table I/II/III-style report. `label_header` names the first
/// column ("Image Type", "Model", ...).
pub fn render_report(rows: &[BenchmarkRow], format: ReportFormat, label_header: &str) -> Result<String, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::NoRows);
    }
    let header: Vec<String> = std::iter::once(label_header.to_string())
        .chain(REPORT_COLUMNS.iter().map(|c| c.to_string()))
        .collect();
    let body: Vec<[String; 5]> = rows.iter().map(row_cells).collect();
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}|", vec!["---"; header.len()].join("|"));
            for cells in &body {
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "{}", header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","));
            for cells in &body {
                let _ = writeln!(out, "{}", cells.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
            }
        }
        ReportFormat::Text => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
            for cells in &body {
                for (w, c) in widths.iter_mut().zip(cells.iter()) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let line = |cells: &[String]| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            let _ = writeln!(out, "{}", line(&header));
            for cells in &body {
                let _ = writeln!(out, "{}", line(cells));
            }
        }
    }
    Ok(out)
}

/// Parse benchmark rows from CSV with header
/// `label,test_accuracy,demo_accuracy,model_size_mb,inference_ms`; empty
/// cells mean "not measured".
pub fn parse_rows_csv(text: &str) -> Result<Vec<BenchmarkRow>, BenchError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(BenchError::NoRows);
    };
    let expected = ["label", "test_accuracy", "demo_accuracy", "model_size_mb", "inference_ms"];
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != expected {
        return Err(BenchError::Rows {
            line: 1,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields = split_csv_line(line);
        let err = |message: String| BenchError::Rows { line: i + 1, message };
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let num = |s: &str, name: &str| -> Result<Option<f64>, BenchError> {
            let s = s.trim();
            if s.is_empty() || s == "-" {
                return Ok(None);
            }
            let v: f64 = s.parse().map_err(|_| err(format!("{name} `{s}` is not a number")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(err(format!("{name} must be a non-negative number")));
            }
            Ok(Some(v))
        };
        rows.push(BenchmarkRow {
            label: fields[0].clone(),
            test_accuracy: num(&fields[1], "test_accuracy")?.ok_or_else(|| err("test_accuracy is required".into()))?,
            demo_accuracy: num(&fields[2], "demo_accuracy")?,
            model_size_mb: num(&fields[3], "model_size_mb")?,
            inference_ms: num(&fields[4], "inference_ms")?,
        });
    }
    if rows.is_empty() {
        return Err(BenchError::NoRows);
    }
    Ok(rows)
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}
