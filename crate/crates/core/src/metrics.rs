//! Per-round metrics files and the cross-seed summary table.
//!
//! A metrics file is plain CSV: the header line [`METRICS_HEADER`], then one
//! line per evaluated round. Integers are written in decimal; reals in
//! scientific notation with 17 significant digits (`{:.16e}`), which parses
//! back to the identical `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "round,test_accuracy,test_loss,mean_phi,mean_lambda,update_norm,wall_ms";
pub const SUMMARY_HEADER: &str = "method,seeds,window,mean_accuracy,std_accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Number of completed rounds when the record was taken.
    pub round: u32,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub mean_phi: f64,
    pub mean_lambda: f64,
    pub update_norm: f64,
    /// Zero unless wall-clock recording is enabled.
    pub wall_ms: u64,
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_metrics<'a>(records: impl IntoIterator<Item = &'a MetricsRecord>) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            real(r.test_accuracy),
            real(r.test_loss),
            real(r.mean_phi),
            real(r.mean_lambda),
            real(r.update_norm),
            r.wall_ms
        );
    }
    out
}

pub fn emit_metrics<'a>(
    records: impl IntoIterator<Item = &'a MetricsRecord>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_metrics(records)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, path)
}

pub fn parse_metrics(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        _ => return Err(err(1, format!("expected header `{METRICS_HEADER}`"))),
    }
    let mut records: Vec<MetricsRecord> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(err(lineno, format!("expected 7 fields, found {}", fields.len())));
        }
        let real = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| err(lineno, format!("field {j} `{}` is not a real", fields[j])))
        };
        let record = MetricsRecord {
            round: fields[0]
                .parse()
                .map_err(|_| err(lineno, format!("round `{}` is not an integer", fields[0])))?,
            test_accuracy: real(1)?,
            test_loss: real(2)?,
            mean_phi: real(3)?,
            mean_lambda: real(4)?,
            update_norm: real(5)?,
            wall_ms: fields[6]
                .parse()
                .map_err(|_| err(lineno, format!("wall_ms `{}` is not an integer", fields[6])))?,
        };
        if records.last().is_some_and(|prev| prev.round >= record.round) {
            return Err(err(lineno, "rounds must be strictly increasing".into()));
        }
        records.push(record);
    }
    Ok(records)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracies of the last `window` records (all of them if fewer).
pub fn final_window(records: &[MetricsRecord], window: usize) -> &[MetricsRecord] {
    &records[records.len().saturating_sub(window)..]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub seeds: usize,
    pub window: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl SummaryRow {
    /// Pools the final-window accuracies of every seed of one method.
    pub fn from_runs<'a>(
        method: impl Into<String>,
        runs: impl IntoIterator<Item = &'a [MetricsRecord]>,
        window: usize,
    ) -> Self {
        let mut seeds = 0;
        let mut pooled = Vec::new();
        for records in runs {
            seeds += 1;
            pooled.extend(final_window(records, window).iter().map(|r| r.test_accuracy));
        }
        let (mean_accuracy, std_accuracy) = mean_std(&pooled);
        Self {
            method: method.into(),
            seeds,
            window,
            mean_accuracy,
            std_accuracy,
        }
    }
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.method,
            r.seeds,
            r.window,
            real(r.mean_accuracy),
            real(r.std_accuracy)
        );
    }
    out
}
