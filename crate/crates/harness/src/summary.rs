use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Serialize;

use crate::config::Method;
use crate::error::{HarnessError, Result};
use crate::experiment::{ExperimentResult, METRIC_COLUMNS};

/// Percentile `q` in `[0, 1]` of sorted values by linear interpolation
/// between order statistics at rank `q (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub coreset_size: usize,
    pub metric: String,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub count: usize,
}

/// One row per (method, coreset size, metric) over successful cells.
/// Metrics with no finite values in a group are omitted.
pub fn summarize(results: &[ExperimentResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.is_ok()) {
        for (k, v) in r.metric_values().into_iter().enumerate() {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                groups.entry((r.method, r.coreset_size, k)).or_default().push(v);
            }
        }
    }
    groups
        .into_iter()
        .map(|((method, coreset_size, k), mut vals)| {
            vals.sort_by(f64::total_cmp);
            SummaryRow {
                method: method.to_string(),
                coreset_size,
                metric: METRIC_COLUMNS[k].to_string(),
                median: percentile_sorted(&vals, 0.5),
                p25: percentile_sorted(&vals, 0.25),
                p75: percentile_sorted(&vals, 0.75),
                count: vals.len(),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a results CSV written by the harness.
pub fn read_results<R: Read>(input: R) -> Result<Vec<ExperimentResult>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    let expected = crate::experiment::RESULT_COLUMNS;
    if headers.iter().ne(expected.iter().copied()) {
        return Err(HarnessError::Dataset {
            path: "results".into(),
            message: format!("unexpected header; expected {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        out.push(ExperimentResult::from_record(&record).map_err(|message| HarnessError::Dataset {
            path: "results".into(),
            message: format!("row {line}: {message}"),
        })?);
    }
    Ok(out)
}
