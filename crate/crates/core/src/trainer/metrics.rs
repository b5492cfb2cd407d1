use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsReport;
use crate::error::{Error, Result};

/// One training step. The diagnostic columns are filled only on snapshot
/// steps and left empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub jepa: f64,
    pub vicreg: f64,
    pub vicreg_sim: f64,
    pub vicreg_std: f64,
    pub vicreg_cov: f64,
    pub lr: f64,
    pub wd: f64,
    pub ema: f64,
    pub min_std: Option<f64>,
    pub mean_std: Option<f64>,
    pub offdiag_cov: Option<f64>,
    pub effective_rank: Option<f64>,
    pub collapsed: Option<bool>,
}

/// Numeric columns, in CSV order after `step`.
pub const METRIC_NAMES: [&str; 13] = [
    "loss",
    "jepa",
    "vicreg",
    "vicreg_sim",
    "vicreg_std",
    "vicreg_cov",
    "lr",
    "wd",
    "ema",
    "min_std",
    "mean_std",
    "offdiag_cov",
    "effective_rank",
];

impl MetricsRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "loss" => Some(self.loss),
            "jepa" => Some(self.jepa),
            "vicreg" => Some(self.vicreg),
            "vicreg_sim" => Some(self.vicreg_sim),
            "vicreg_std" => Some(self.vicreg_std),
            "vicreg_cov" => Some(self.vicreg_cov),
            "lr" => Some(self.lr),
            "wd" => Some(self.wd),
            "ema" => Some(self.ema),
            "min_std" => self.min_std,
            "mean_std" => self.mean_std,
            "offdiag_cov" => self.offdiag_cov,
            "effective_rank" => self.effective_rank,
            _ => None,
        }
    }

    pub fn attach(&mut self, report: &DiagnosticsReport<f64>) {
        self.min_std = Some(report.min_std);
        self.mean_std = Some(report.mean_std);
        self.offdiag_cov = Some(report.offdiag_cov_norm);
        self.effective_rank = Some(report.effective_rank);
        self.collapsed = Some(report.collapsed);
    }

    pub fn has_diagnostics(&self) -> bool {
        self.min_std.is_some()
    }
}

/// Per-step training metrics with strictly increasing step indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::MisalignedLogs(format!(
                    "step {} does not follow step {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn steps(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.step).collect()
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    /// Last record carrying a diagnostics snapshot.
    pub fn last_snapshot(&self) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.has_diagnostics())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        if self.records.is_empty() {
            out.write_record(csv_header())?;
        }
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses a log written by [`MetricsLog::write_csv`]. Malformed or
    /// truncated rows are reported with their line number.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers()?.clone();
        if header.iter().ne(csv_header()) {
            return Err(Error::Parse { line: 1, message: format!("unexpected header {:?}", header.as_slice()) });
        }
        let mut log = MetricsLog::new();
        for row in reader.deserialize::<MetricsRecord>() {
            let rec = row?;
            let line = log.len() as u64 + 2;
            log.push(rec).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        }
        Ok(log)
    }
}

fn csv_header() -> impl Iterator<Item = &'static str> {
    std::iter::once("step").chain(METRIC_NAMES).chain(std::iter::once("collapsed"))
}
