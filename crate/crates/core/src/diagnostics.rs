//! Collapse metrics for embedding snapshots and comparison of training runs.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::batch::Embeddings;
use crate::error::{Error, Result};
use crate::linalg::{batch_variance, effective_rank, DenseMatrix};
use crate::scalar::Scalar;
use crate::trainer::{MetricsLog, METRIC_NAMES};
use crate::vicreg::covariance_term;

/// Minimum per-dimension std below which a batch counts as collapsed.
pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Serialize")]
pub struct DiagnosticsReport<T> {
    pub step: usize,
    pub per_dim_std: Vec<T>,
    pub min_std: T,
    pub mean_std: T,
    /// Off-diagonal covariance penalty `c(z)`.
    pub offdiag_cov_norm: T,
    pub effective_rank: T,
    pub collapsed: bool,
}

/// Statistics of one embedding batch. `step` is 0; see [`collapse_report_at`].
pub fn collapse_report<T: Scalar>(z: &Embeddings<T>, threshold: T) -> Result<DiagnosticsReport<T>> {
    collapse_report_at(z, threshold, 0)
}

pub fn collapse_report_at<T: Scalar>(z: &Embeddings<T>, threshold: T, step: usize) -> Result<DiagnosticsReport<T>> {
    if z.n() < 2 {
        return Err(Error::BatchTooSmall { n: z.n(), min: 2 });
    }
    // rows in a canonical order so every sum runs in the same sequence
    // whatever order the batch arrived in
    let mut rows: Vec<&[T]> = (0..z.n()).map(|r| z.values().row(r)).collect();
    rows.sort_by(|a, b| {
        a.iter().zip(*b).map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    });
    let sorted = DenseMatrix::from_fn(z.n(), z.d(), |r, c| rows[r][c]);
    let z = &Embeddings::new(sorted)?;
    let per_dim_std: Vec<T> = batch_variance(z)?.into_iter().map(|v| v.sqrt()).collect();
    let min_std = per_dim_std.iter().copied().fold(T::infinity(), T::min);
    let mean_std = per_dim_std.iter().copied().sum::<T>() / T::from_count(per_dim_std.len());
    Ok(DiagnosticsReport {
        step,
        min_std,
        // the mean can land an ulp below the minimum when all entries agree
        mean_std: mean_std.max(min_std),
        per_dim_std,
        offdiag_cov_norm: covariance_term(z)?.value,
        effective_rank: effective_rank(z)?,
        collapsed: min_std < threshold,
    })
}

/// Difference series of one metric, `a − b` at each aligned step where both
/// logs carry a value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: String,
    pub steps: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub delta: Vec<f64>,
}

impl MetricDelta {
    pub fn final_delta(&self) -> Option<f64> {
        self.delta.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunComparison {
    pub metrics: Vec<MetricDelta>,
}

impl RunComparison {
    pub fn get(&self, metric: &str) -> Option<&MetricDelta> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    /// `(metric, a, b, a − b)` at the last aligned step of each metric.
    pub fn final_deltas(&self) -> Vec<(String, f64, f64, f64)> {
        self.metrics
            .iter()
            .filter_map(|m| {
                let i = m.delta.len().checked_sub(1)?;
                Some((m.metric.clone(), m.a[i], m.b[i], m.delta[i]))
            })
            .collect()
    }

    /// Columns `step,metric,a,b,delta`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "metric", "a", "b", "delta"])?;
        for m in &self.metrics {
            for i in 0..m.steps.len() {
                out.write_record([
                    m.steps[i].to_string(),
                    m.metric.clone(),
                    m.a[i].to_string(),
                    m.b[i].to_string(),
                    m.delta[i].to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-metric differences between two logs recorded on the same step grid.
pub fn compare_runs(a: &MetricsLog, b: &MetricsLog) -> Result<RunComparison> {
    if a.len() != b.len() {
        return Err(Error::MisalignedLogs(format!("{} records vs {}", a.len(), b.len())));
    }
    if let Some((ra, rb)) = a.records.iter().zip(&b.records).find(|(x, y)| x.step != y.step) {
        return Err(Error::MisalignedLogs(format!("step {} vs step {}", ra.step, rb.step)));
    }
    let metrics = METRIC_NAMES
        .iter()
        .map(|&name| {
            let mut m = MetricDelta { metric: name.to_string(), steps: vec![], a: vec![], b: vec![], delta: vec![] };
            for (ra, rb) in a.records.iter().zip(&b.records) {
                if let (Some(x), Some(y)) = (ra.metric(name), rb.metric(name)) {
                    m.steps.push(ra.step);
                    m.a.push(x);
                    m.b.push(y);
                    m.delta.push(x - y);
                }
            }
            m
        })
        .collect();
    Ok(RunComparison { metrics })
}
