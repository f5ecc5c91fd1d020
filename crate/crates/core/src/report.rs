//! Comparison reports and their on-disk forms.
//!
//! A report is one row per strategy. The CSV form keeps a stable column
//! order so downstream plotting never has to sniff headers, and it parses
//! back into the exact same in-memory report (floats are written with
//! shortest round-trip formatting). Failed strategies keep their row with
//! empty metric cells so a partial comparison is still a complete file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::CurvePoint;

pub const REPORT_COLUMNS: [&str; 9] = [
    "strategy",
    "variant",
    "k",
    "acc",
    "peak_bytes",
    "select_ms",
    "status",
    "curves",
    "model_hash",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// `category` is the stable [`Error::category`] label of the failure.
    Failed { category: String },
}

impl RowStatus {
    fn as_cell(&self) -> String {
        match self {
            RowStatus::Ok => "ok".to_string(),
            RowStatus::Failed { category } => format!("failed:{category}"),
        }
    }

    fn from_cell(cell: &str) -> Option<RowStatus> {
        if cell == "ok" {
            return Some(RowStatus::Ok);
        }
        cell.strip_prefix("failed:").map(|c| RowStatus::Failed {
            category: c.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRow {
    pub strategy: String,
    pub variant: String,
    pub k: u64,
    pub acc: Option<f64>,
    pub peak_bytes: Option<u64>,
    pub select_ms: Option<f64>,
    pub status: RowStatus,
    /// File name of this strategy's per-epoch curves CSV, empty when the
    /// run produced none.
    pub curves: String,
    pub model_hash: String,
}

impl StrategyRow {
    pub fn failed(strategy: &str, variant: &str, k: u64, hash: &str, category: &str) -> StrategyRow {
        StrategyRow {
            strategy: strategy.to_string(),
            variant: variant.to_string(),
            k,
            acc: None,
            peak_bytes: None,
            select_ms: None,
            status: RowStatus::Failed {
                category: category.to_string(),
            },
            curves: String::new(),
            model_hash: hash.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub rows: Vec<StrategyRow>,
}

fn opt_cell<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => String::new(),
    }
}

fn parse_opt<T: std::str::FromStr>(cell: &str) -> std::result::Result<Option<T>, T::Err> {
    if cell.is_empty() {
        Ok(None)
    } else {
        cell.parse().map(Some)
    }
}

impl RunReport {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_COLUMNS)
            .map_err(|e| Error::data(format!("csv emit failed: {e}")))?;
        for row in &self.rows {
            w.write_record([
                row.strategy.clone(),
                row.variant.clone(),
                row.k.to_string(),
                opt_cell(&row.acc),
                opt_cell(&row.peak_bytes),
                opt_cell(&row.select_ms),
                row.status.as_cell(),
                row.curves.clone(),
                row.model_hash.clone(),
            ])
            .map_err(|e| Error::data(format!("csv emit failed: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::data(format!("csv emit failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    pub fn from_csv_str(text: &str, origin: &str) -> Result<RunReport> {
        let bad = |offset: u64, msg: String| Error::Parse {
            path: origin.to_string(),
            offset,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| bad(0, format!("unreadable header: {e}")))?
            .clone();
        if headers.iter().ne(REPORT_COLUMNS) {
            return Err(bad(
                0,
                format!(
                    "expected columns {:?}, found {:?}",
                    REPORT_COLUMNS.join(","),
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(0, format!("unreadable record: {e}")))?;
            let at = record.position().map_or(0, |p| p.byte());
            if record.len() != REPORT_COLUMNS.len() {
                return Err(bad(
                    at,
                    format!("expected {} cells, found {}", REPORT_COLUMNS.len(), record.len()),
                ));
            }
            let cell = |i: usize| record.get(i).unwrap_or("");
            let status = RowStatus::from_cell(cell(6))
                .ok_or_else(|| bad(at, format!("unknown status {:?}", cell(6))))?;
            rows.push(StrategyRow {
                strategy: cell(0).to_string(),
                variant: cell(1).to_string(),
                k: cell(2)
                    .parse()
                    .map_err(|e| bad(at, format!("bad k {:?}: {e}", cell(2))))?,
                acc: parse_opt(cell(3))
                    .map_err(|e| bad(at, format!("bad acc {:?}: {e}", cell(3))))?,
                peak_bytes: parse_opt(cell(4))
                    .map_err(|e| bad(at, format!("bad peak_bytes {:?}: {e}", cell(4))))?,
                select_ms: parse_opt(cell(5))
                    .map_err(|e| bad(at, format!("bad select_ms {:?}: {e}", cell(5))))?,
                status,
                curves: cell(7).to_string(),
                model_hash: cell(8).to_string(),
            });
        }
        Ok(RunReport { rows })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<RunReport> {
        let text = fs::read_to_string(path)?;
        RunReport::from_csv_str(&text, &path.display().to_string())
    }

    /// Structured-text rendering, one block per strategy.
    pub fn to_text_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "comparison report");
        let _ = writeln!(out, "strategies {}", self.rows.len());
        for row in &self.rows {
            let _ = writeln!(out);
            let _ = writeln!(out, "strategy {}", row.strategy);
            let _ = writeln!(out, "  variant    {}", row.variant);
            let _ = writeln!(out, "  k          {}", row.k);
            let _ = writeln!(out, "  status     {}", row.status.as_cell());
            if let Some(acc) = row.acc {
                let _ = writeln!(out, "  acc        {acc}");
            }
            if let Some(peak) = row.peak_bytes {
                let _ = writeln!(out, "  peak_bytes {peak}");
            }
            if let Some(ms) = row.select_ms {
                let _ = writeln!(out, "  select_ms  {ms}");
            }
            if !row.curves.is_empty() {
                let _ = writeln!(out, "  curves     {}", row.curves);
            }
            let _ = writeln!(out, "  model      {}", row.model_hash);
        }
        out
    }
}

/// Write per-epoch curves as plot-ready CSV.
pub fn save_curves(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for c in curves {
        let _ = writeln!(out, "{},{},{}", c.epoch, c.train_loss, c.val_accuracy);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path)?;
    let origin = path.display().to_string();
    let bad = |offset: u64, msg: String| Error::Parse {
        path: origin.clone(),
        offset,
        msg,
    };
    let mut offset = 0u64;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(0, "empty file".to_string()))?;
    if header != "epoch,train_loss,val_acc" {
        return Err(bad(0, format!("unexpected header {header:?}")));
    }
    offset += header.len() as u64 + 1;
    let mut curves = Vec::new();
    for line in lines {
        if line.is_empty() {
            offset += 1;
            continue;
        }
        let mut cells = line.split(',');
        let mut next = |what: &str| {
            cells
                .next()
                .ok_or_else(|| bad(offset, format!("missing {what}")))
        };
        let epoch = next("epoch")?
            .parse()
            .map_err(|e| bad(offset, format!("bad epoch: {e}")))?;
        let train_loss = next("train_loss")?
            .parse()
            .map_err(|e| bad(offset, format!("bad train_loss: {e}")))?;
        let val_accuracy = next("val_acc")?
            .parse()
            .map_err(|e| bad(offset, format!("bad val_acc: {e}")))?;
        curves.push(CurvePoint {
            epoch,
            train_loss,
            val_accuracy,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(curves)
}
