//! Bit-stable CSV and JSON renderings of a [`MetricReport`].

use std::collections::BTreeMap;
use std::path::Path;

use kcd_core::metrics::{MetricReport, MetricRow, MetricSummary, METRIC_COLUMNS};
use serde_json::{json, Map, Value};

use crate::dataset::{write_file, DatasetError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn fixed(v: f64) -> String {
    format!("{v:.4}")
}

/// Value rounded through its 4-decimal rendering, so JSON and CSV agree.
fn rounded(v: f64) -> Value {
    let r: f64 = fixed(v).parse().expect("formatted float parses");
    json!(r)
}

/// `strategy,id,<metrics>,error` rows in report order, then one `mean` row
/// per strategy. An empty report is a header line only.
pub fn report_to_csv(report: &MetricReport) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["strategy", "id"];
    header.extend(METRIC_COLUMNS);
    header.push("error");
    w.write_record(&header).expect("write to memory");
    let metrics = |values: &BTreeMap<String, f64>| -> Vec<String> {
        METRIC_COLUMNS.iter().map(|c| values.get(*c).map(|v| fixed(*v)).unwrap_or_default()).collect()
    };
    for row in &report.rows {
        let mut rec = vec![row.strategy.clone(), row.id.clone()];
        rec.extend(metrics(&row.values));
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec).expect("write to memory");
    }
    for (strategy, summary) in &report.aggregate {
        let mut rec = vec![strategy.clone(), "mean".to_string()];
        rec.extend(metrics(&summary.mean));
        rec.push(if summary.failed > 0 { format!("{} failed", summary.failed) } else { String::new() });
        w.write_record(&rec).expect("write to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

fn values_json(values: &BTreeMap<String, f64>) -> Value {
    Value::Object(values.iter().map(|(k, v)| (k.clone(), rounded(*v))).collect())
}

/// Pretty JSON with sorted keys and values rounded to 4 decimals.
pub fn report_to_json(report: &MetricReport) -> String {
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| json!({"strategy": r.strategy, "id": r.id, "values": values_json(&r.values), "error": r.error}))
        .collect();
    let aggregate: Map<String, Value> = report
        .aggregate
        .iter()
        .map(|(s, m)| (s.clone(), json!({"count": m.count, "failed": m.failed, "mean": values_json(&m.mean)})))
        .collect();
    let mut text = serde_json::to_string_pretty(&json!({"rows": rows, "aggregate": aggregate})).expect("json");
    text.push('\n');
    text
}

/// Inverse of [`report_to_json`] (up to the 4-decimal rounding).
pub fn report_from_json(text: &str) -> Result<MetricReport, serde_json::Error> {
    #[derive(serde::Deserialize)]
    struct Wire {
        rows: Vec<MetricRow>,
        aggregate: BTreeMap<String, MetricSummary>,
    }
    let w: Wire = serde_json::from_str(text)?;
    Ok(MetricReport { rows: w.rows, aggregate: w.aggregate })
}

pub fn render_report(report: &MetricReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => report_to_csv(report),
        ReportFormat::Json => report_to_json(report),
    }
}

pub fn emit_report(report: &MetricReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_file(path.as_ref(), render_report(report, format).as_bytes())
}
