//! Per-batch metric records, the line-delimited metric log, and summaries.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GroundTruth;
use crate::engine::BatchResult;
use crate::error::{Error, Result};
use crate::math::{kl_divergence, l2_label_distance, ProbVector};
use crate::metrics;

/// One line of the metric log. Label-dependent fields are present only when
/// ground truth was available for the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub t: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    /// `KL(true prior ‖ P̂)` using the prior that adjusted this batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    /// L2 distance between the true prior and the source prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_shift_l2: Option<f64>,
    pub p_hat: Vec<f64>,
    pub confident_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistent_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_weight: Option<f64>,
    pub member_weights: Vec<f64>,
    pub member_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<f64>,
    pub skipped_updates: usize,
}

impl MetricRecord {
    pub fn new(result: &BatchResult, truth: Option<&GroundTruth>, p0: &ProbVector) -> Result<Self> {
        let k = result.predictions.cols();
        let mut rec = Self {
            t: result.t,
            n: result.labels.len(),
            accuracy: None,
            balanced_accuracy: None,
            f1: None,
            kl: None,
            label_shift_l2: None,
            p_hat: result.prior_used.to_vec(),
            confident_fraction: result.confident_fraction,
            consistent_fraction: result.consistent_fraction,
            mean_weight: result.mean_weight,
            member_weights: result.member_weights.clone(),
            member_losses: result.member_losses.clone(),
            condition: result.condition.filter(|c| c.is_finite()),
            skipped_updates: result.skipped_updates,
        };
        if let Some(truth) = truth {
            if truth.labels.len() != result.labels.len() {
                return Err(Error::DimensionMismatch {
                    expected: result.labels.len(),
                    actual: truth.labels.len(),
                    context: "ground-truth label count",
                });
            }
            rec.accuracy = Some(metrics::accuracy(&result.labels, &truth.labels, k)?);
            rec.balanced_accuracy = Some(metrics::balanced_accuracy(&result.labels, &truth.labels, k)?);
            rec.f1 = Some(metrics::f1(&result.labels, &truth.labels, k)?);
            rec.kl = Some(kl_divergence(&truth.prior, &result.prior_used));
            rec.label_shift_l2 = Some(l2_label_distance(&truth.prior, p0)?);
        }
        Ok(rec)
    }
}

/// Builds records for a run; `truth`, when given, must cover every batch.
pub fn records(results: &[BatchResult], truth: Option<&[GroundTruth]>, p0: &ProbVector) -> Result<Vec<MetricRecord>> {
    if let Some(tr) = truth {
        if tr.len() != results.len() {
            return Err(Error::DimensionMismatch {
                expected: results.len(),
                actual: tr.len(),
                context: "ground-truth batch count",
            });
        }
    }
    results
        .iter()
        .enumerate()
        .map(|(i, r)| MetricRecord::new(r, truth.map(|tr| &tr[i]), p0))
        .collect()
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[MetricRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_log(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(file), records).map_err(|e| Error::io(path, e))
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Mean and population standard deviation of one scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: &'static str,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

type Field = (&'static str, fn(&MetricRecord) -> Option<f64>);

const FIELDS: [Field; 8] = [
    ("accuracy", |r| r.accuracy),
    ("balanced_accuracy", |r| r.balanced_accuracy),
    ("f1", |r| r.f1),
    ("kl", |r| r.kl),
    ("label_shift_l2", |r| r.label_shift_l2),
    ("confident_fraction", |r| Some(r.confident_fraction)),
    ("consistent_fraction", |r| r.consistent_fraction),
    ("mean_weight", |r| r.mean_weight),
];

/// Summary over the fields present in at least one record.
pub fn summarize(records: &[MetricRecord]) -> Vec<SummaryRow> {
    FIELDS
        .iter()
        .filter_map(|(name, get)| {
            let vals: Vec<f64> = records.iter().filter_map(get).collect();
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Some(SummaryRow {
                metric: name,
                count: vals.len(),
                mean,
                std: var.sqrt(),
            })
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(mut out: W, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(out, "metric,count,mean,std")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.metric, r.count, r.mean, r.std)?;
    }
    out.flush()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per batch with the plotted series; missing values are empty.
pub fn write_plot_csv<W: Write>(mut out: W, records: &[MetricRecord]) -> std::io::Result<()> {
    let k = records.first().map_or(0, |r| r.p_hat.len());
    let m = records.first().map_or(0, |r| r.member_weights.len());
    let mut header: Vec<String> = FIELDS.iter().map(|(n, _)| n.to_string()).collect();
    header.insert(0, "t".into());
    header.extend((0..k).map(|c| format!("p_hat_{c}")));
    header.extend((0..m).map(|i| format!("member_weight_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let mut row = vec![r.t.to_string()];
        row.extend(FIELDS.iter().map(|(_, get)| cell(get(r))));
        row.extend(r.p_hat.iter().map(f64::to_string));
        row.extend(r.member_weights.iter().map(f64::to_string));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}
