//! Consolidation of a finished training experiment.
//!
//! `report.csv` is long-format with header
//! `arm,iteration,phase,metric,value,delta_vs_sft_only`: one row per arm,
//! snapshot and metric, values averaged over replications. The delta is the
//! difference to the final snapshot of the `sft_only` arm and is empty when
//! that arm is absent. `report.json` lists each arm's final snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::fmt_value;
use crate::{Error, Result};

pub const REFERENCE_ARM: &str = "sft_only";

const KEY_COLUMNS: [&str; 3] = ["arm", "iteration", "phase"];
const LEAD_METRICS: [&str; 5] = ["hr", "ndcg", "div_ratio", "or_ratio", "mgu"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub iteration: usize,
    pub phase: String,
    pub metric: String,
    pub value: f64,
    pub delta_vs_sft_only: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFinal {
    pub arm: String,
    pub iteration: usize,
    pub phase: String,
    pub metrics: BTreeMap<String, f64>,
    pub delta_vs_sft_only: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub finals: Vec<ArmFinal>,
}

fn schema(path: &Path, detail: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Checks the fixed metrics header and returns the metric column names.
fn check_header(path: &Path, header: &csv::StringRecord) -> Result<Vec<String>> {
    let cols: Vec<&str> = header.iter().collect();
    let fixed = KEY_COLUMNS.len() + LEAD_METRICS.len();
    if cols.len() < fixed + 2 {
        return Err(schema(path, "too few columns"));
    }
    let n_groups = cols.len() - fixed - 1;
    let expected = crate::metrics::csv_header(n_groups);
    if cols != expected {
        return Err(schema(path, format!("header `{}` differs from `{}`", cols.join(","), expected.join(","))));
    }
    Ok(expected.into_iter().skip(KEY_COLUMNS.len()).collect())
}

type Key = (String, usize, String);

/// Metric names and per-key means.
pub type MetricMeans = (Vec<String>, Vec<(Key, Vec<f64>)>);

/// Reads `metrics.csv` and averages rows sharing `(arm, iteration, phase)`.
/// Keys keep their order of first appearance.
pub fn read_metric_means(path: &Path) -> Result<MetricMeans> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let names = check_header(path, reader.headers()?)?;
    let mut order: Vec<Key> = Vec::new();
    let mut sums: BTreeMap<Key, (Vec<f64>, usize)> = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| schema(path, format!("row {}: {what}", line + 2));
        if rec.len() != names.len() + KEY_COLUMNS.len() {
            return Err(bad("wrong number of fields"));
        }
        let iteration: usize = rec[1].parse().map_err(|_| bad("iteration is not an integer"))?;
        if crate::training::Phase::parse(&rec[2]).is_none() {
            return Err(bad("unknown phase"));
        }
        let key = (rec[0].to_string(), iteration, rec[2].to_string());
        let values: Vec<f64> = rec
            .iter()
            .skip(KEY_COLUMNS.len())
            .map(|v| v.parse::<f64>().map_err(|_| bad("non-numeric metric")))
            .collect::<Result<_>>()?;
        let entry = sums.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (vec![0.0; values.len()], 0)
        });
        for (s, v) in entry.0.iter_mut().zip(&values) {
            *s += v;
        }
        entry.1 += 1;
    }
    if order.is_empty() {
        return Err(schema(path, "no data rows"));
    }
    let means = order
        .into_iter()
        .map(|k| {
            let (s, n) = &sums[&k];
            let m = s.iter().map(|v| v / *n as f64).collect();
            (k, m)
        })
        .collect();
    Ok((names, means))
}

/// Builds the report for an experiment directory without writing it.
pub fn build_report(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let (names, means) = read_metric_means(&dir.join("metrics.csv"))?;
    // the last row of an arm is its final snapshot
    let mut last_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut arms: Vec<&str> = Vec::new();
    for (i, ((arm, _, _), _)) in means.iter().enumerate() {
        if !last_of.contains_key(arm.as_str()) {
            arms.push(arm);
        }
        last_of.insert(arm, i);
    }
    let reference = last_of.get(REFERENCE_ARM).map(|&i| &means[i].1);
    let delta = |values: &[f64]| -> Option<Vec<f64>> {
        reference.map(|r| values.iter().zip(r).map(|(v, b)| v - b).collect())
    };
    let mut rows = Vec::new();
    for ((arm, iteration, phase), values) in &means {
        let d = delta(values);
        for (j, name) in names.iter().enumerate() {
            rows.push(ReportRow {
                arm: arm.clone(),
                iteration: *iteration,
                phase: phase.clone(),
                metric: name.clone(),
                value: values[j],
                delta_vs_sft_only: d.as_ref().map(|d| d[j]),
            });
        }
    }
    let to_map = |v: &[f64]| -> BTreeMap<String, f64> { names.iter().cloned().zip(v.iter().copied()).collect() };
    let finals = arms
        .iter()
        .map(|arm| {
            let ((_, iteration, phase), values) = &means[last_of[arm]];
            ArmFinal {
                arm: arm.to_string(),
                iteration: *iteration,
                phase: phase.clone(),
                metrics: to_map(values),
                delta_vs_sft_only: delta(values).map(|d| to_map(&d)),
            }
        })
        .collect();
    Ok(Report { rows, finals })
}

/// Writes `report.csv` and `report.json` into a finished experiment
/// directory.
pub fn emit_report(dir: &Path) -> Result<Report> {
    let report = build_report(dir)?;
    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    w.write_record(["arm", "iteration", "phase", "metric", "value", "delta_vs_sft_only"])?;
    for r in &report.rows {
        w.write_record([
            r.arm.clone(),
            r.iteration.to_string(),
            r.phase.clone(),
            r.metric.clone(),
            fmt_value(r.value),
            r.delta_vs_sft_only.map(fmt_value).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report.finals)?)?;
    Ok(report)
}
