//! CSV and JSON persistence for series and structures.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::series::Series;
use crate::error::{Error, Result};

/// Writes `t,var_0,...,var_{M-1}` with one row per time step.
pub fn write_series_csv(path: &Path, series: &Series) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend((0..series.vars()).map(|m| format!("var_{m}")));
    w.write_record(&header).map_err(|e| Error::parse(path, e))?;
    for t in 0..series.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(series.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a series written by [`write_series_csv`] (or any CSV whose first
/// column is a time index and remaining columns are variables).
pub fn read_series_csv(path: &Path) -> Result<Series> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let headers = r.headers().map_err(|e| Error::parse(path, e))?.clone();
    if headers.get(0) != Some("t") || headers.len() < 2 {
        return Err(Error::parse(path, "expected header `t,var_0,...`"));
    }
    let vars = headers.len() - 1;
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        if rec.len() != vars + 1 {
            return Err(Error::parse(path, format!("row {}: wrong column count", line + 1)));
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(path, format!("row {}: bad number {field:?}", line + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, format!("row {}: non-finite value", line + 1)));
            }
            values.push(v);
        }
    }
    Series::new(vars, values)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads JSON; parse failures carry the line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}
