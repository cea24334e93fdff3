use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::experiment::ExperimentRecord;

/// `v` rounded to 6 significant digits.
pub fn round_sig(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Header plus one row per record, in field order.
pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

pub(crate) const RECORD_COLUMNS: [&str; 15] = [
    "seed",
    "dataset",
    "attack",
    "flips",
    "defense",
    "p",
    "gamma",
    "quality_pre",
    "quality_attack",
    "quality_repair",
    "attack_detected",
    "flip_detect_ratio",
    "reconstructed",
    "t_attack_ms",
    "t_defense_ms",
];

pub fn records_to_csv(records: &[ExperimentRecord]) -> Result<String> {
    to_csv(records, &RECORD_COLUMNS)
}

pub fn read_csv(text: &str) -> Result<Vec<ExperimentRecord>> {
    from_csv(text)
}

pub fn records_to_json(records: &[ExperimentRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn read_json(text: &str) -> Result<Vec<ExperimentRecord>> {
    Ok(serde_json::from_str(text)?)
}

/// Writes `records` to `path` in the chosen format.
pub fn write_report(records: &[ExperimentRecord], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => records_to_csv(records)?,
        ReportFormat::Json => records_to_json(records)?,
    };
    fs::write(path, text)?;
    Ok(())
}
