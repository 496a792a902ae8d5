//! Confusion counts, metrics, fold and subgraph aggregation, reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{OccupancyFrame, Resolution};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    /// Counts over one predicted frame against its ground truth.
    pub fn from_frame(pred: &OccupancyFrame, truth: &OccupancyFrame) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::ShapeMismatch(format!(
                "prediction shape {} differs from ground truth {}",
                pred.shape(),
                truth.shape()
            )));
        }
        let tp = pred.intersection_len(truth) as u64;
        let fp = pred.len() as u64 - tp;
        let fn_ = truth.len() as u64 - tp;
        let tn = truth.shape().cubelet_count() - tp - fp - fn_;
        Ok(ConfusionCounts { tp, fp, fn_, tn })
    }

    /// Pooled counts over aligned frame sequences.
    pub fn from_frames(pred: &[OccupancyFrame], truth: &[OccupancyFrame]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predicted frames against {} ground-truth frames",
                pred.len(),
                truth.len()
            )));
        }
        pred.par_iter()
            .zip(truth)
            .map(|(p, t)| Self::from_frame(p, t))
            .try_reduce(ConfusionCounts::default, |a, b| Ok(a + b))
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Metrics from counts and whether any denominator was zero.
    pub fn from_counts(c: &ConfusionCounts) -> (Self, bool) {
        let mut degenerate = false;
        let accuracy = ratio(c.tp + c.tn, c.total(), &mut degenerate);
        let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
        let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            degenerate = true;
            0.0
        };
        (
            Metrics {
                accuracy,
                precision,
                recall,
                f1,
            },
            degenerate,
        )
    }

    fn mean<'a>(ms: impl ExactSizeIterator<Item = &'a Metrics>) -> Metrics {
        let n = ms.len() as f64;
        let s = ms.fold(Metrics::default(), |a, m| Metrics {
            accuracy: a.accuracy + m.accuracy,
            precision: a.precision + m.precision,
            recall: a.recall + m.recall,
            f1: a.f1 + m.f1,
        });
        Metrics {
            accuracy: s.accuracy / n,
            precision: s.precision / n,
            recall: s.recall / n,
            f1: s.f1 / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Fold,
    Subgraph,
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scope: Scope,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Summed counts for aggregates.
    pub counts: ConfusionCounts,
    pub degenerate: bool,
    /// Number of degenerate inputs folded into an aggregate.
    pub degenerate_count: usize,
    /// Metrics of the summed counts, reported beside the headline mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled: Option<Metrics>,
}

impl MetricsRecord {
    pub fn from_counts(counts: ConfusionCounts, scope: Scope) -> Self {
        let (metrics, degenerate) = Metrics::from_counts(&counts);
        MetricsRecord {
            scope,
            metrics,
            counts,
            degenerate,
            degenerate_count: degenerate as usize,
            pooled: None,
        }
    }
}

/// Micro-averaged metrics over every cubelet of every frame pair.
pub fn compute_metrics(pred: &[OccupancyFrame], truth: &[OccupancyFrame], scope: Scope) -> Result<MetricsRecord> {
    Ok(MetricsRecord::from_counts(ConfusionCounts::from_frames(pred, truth)?, scope))
}

fn mean_record(records: &[MetricsRecord]) -> MetricsRecord {
    let counts: ConfusionCounts = records.iter().map(|r| r.counts).sum();
    let degenerate_count = records.iter().filter(|r| r.degenerate).count();
    MetricsRecord {
        scope: Scope::Aggregate,
        metrics: Metrics::mean(records.iter().map(|r| &r.metrics)),
        counts,
        degenerate: degenerate_count > 0,
        degenerate_count,
        pooled: Some(Metrics::from_counts(&counts).0),
    }
}

/// Unweighted mean over exactly `expected` fold records.
pub fn aggregate_folds(records: &[MetricsRecord], expected: usize) -> Result<MetricsRecord> {
    if records.len() != expected || expected == 0 {
        return Err(Error::config(format!(
            "expected {expected} fold records, got {}",
            records.len()
        )));
    }
    Ok(mean_record(records))
}

/// Unweighted mean over subgraph records; degenerate ones count as zeros.
pub fn aggregate_subgraphs(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    if records.is_empty() {
        return Err(Error::config("no subgraph records to aggregate"));
    }
    Ok(mean_record(records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub cubelet_size: [f64; 3],
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate_subgraphs: usize,
}

impl ReportRow {
    pub fn new(model: &str, resolution: Resolution, m: &Metrics, degenerate_subgraphs: usize) -> Self {
        ReportRow {
            model: model.to_string(),
            cubelet_size: resolution.as_array(),
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            degenerate_subgraphs,
        }
    }

    fn volume(&self) -> f64 {
        self.cubelet_size.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

const COLUMNS: [&str; 6] = ["Model", "Size of each cubelet", "Accuracy", "Precision", "Recall", "F1-Score"];

/// Sorts rows coarse to fine (stable on ties) and renders the text table.
pub fn render_report(mut rows: Vec<ReportRow>) -> Result<(Report, String)> {
    if rows.is_empty() {
        return Err(Error::config("report has no rows"));
    }
    rows.sort_by(|a, b| b.volume().total_cmp(&a.volume()));
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            let [cx, cy, cz] = r.cubelet_size;
            [
                r.model.clone(),
                format!("({cx}, {cy}, {cz})"),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.recall),
                format!("{:.4}", r.f1),
            ]
        })
        .collect();
    let mut widths = COLUMNS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut text = String::new();
    let mut line = |fields: &[&str]| {
        let parts: Vec<String> = fields.iter().zip(widths).map(|(f, w)| format!("{f:<w$}")).collect();
        let _ = writeln!(text, "{}", parts.join("  ").trim_end());
    };
    line(&COLUMNS);
    for row in &cells {
        line(&row.each_ref().map(String::as_str));
    }
    Ok((Report { rows }, text))
}
