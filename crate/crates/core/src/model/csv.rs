//! Long-format CSV: one row per observation, header required.
//!
//! Columns are typed per column: numeric when every cell parses as `f64`,
//! categorical when none does or when the column is declared categorical.
//! Columns mixing both are rejected.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CovariateValue, ObservationRecord};

/// Which columns carry the grouping keys and the response.
#[derive(Debug, Clone)]
pub struct CsvLayout {
    pub group: String,
    pub subgroups: Vec<String>,
    pub response: String,
    pub categorical: Vec<String>,
}

impl CsvLayout {
    pub fn new(response: &str) -> Self {
        Self {
            group: "group".into(),
            subgroups: Vec::new(),
            response: response.into(),
            categorical: Vec::new(),
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn read_records_path(path: &Path, layout: &CsvLayout) -> Result<Vec<ObservationRecord>> {
    let file = std::fs::File::open(path)?;
    read_records(file, layout)
}

pub fn read_records<R: Read>(reader: R, layout: &CsvLayout) -> Result<Vec<ObservationRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("required column `{name}` not in header"),
        })
    };
    let group_col = find(&layout.group)?;
    let response_col = find(&layout.response)?;
    let sub_cols: Vec<usize> = layout.subgroups.iter().map(|s| find(s)).collect::<Result<_>>()?;
    let covariate_cols: Vec<usize> = (0..headers.len())
        .filter(|c| *c != group_col && *c != response_col && !sub_cols.contains(c))
        .collect();

    let mut rows: Vec<(u64, csv::StringRecord)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        rows.push((line, rec));
    }

    // Column typing.
    let mut is_numeric: BTreeMap<usize, bool> = BTreeMap::new();
    for &c in &covariate_cols {
        let name = &headers[c];
        if layout.categorical.contains(name) {
            is_numeric.insert(c, false);
            continue;
        }
        let parsed = rows.iter().filter(|(_, r)| r[c].parse::<f64>().is_ok()).count();
        if parsed == rows.len() {
            is_numeric.insert(c, true);
        } else if parsed == 0 {
            is_numeric.insert(c, false);
        } else {
            return Err(Error::InconsistentTypes(name.clone()));
        }
    }

    let mut out = Vec::with_capacity(rows.len());
    for (line, r) in &rows {
        let parse_err = |message: String| Error::Parse { line: *line, message };
        let group = r[group_col].to_string();
        if group.is_empty() {
            return Err(parse_err(format!("empty `{}` value", layout.group)));
        }
        let response: f64 = r[response_col].parse().map_err(|_| {
            parse_err(format!(
                "response `{}` value `{}` is not a number",
                layout.response, &r[response_col]
            ))
        })?;
        if !response.is_finite() {
            return Err(parse_err("non-finite response".into()));
        }
        let mut covariates = BTreeMap::new();
        for &c in &covariate_cols {
            let cell = &r[c];
            if cell.is_empty() {
                return Err(parse_err(format!("missing value for `{}`", headers[c])));
            }
            let v = if is_numeric[&c] {
                let x: f64 = cell.parse().expect("typed as numeric");
                if !x.is_finite() {
                    return Err(parse_err(format!("non-finite value for `{}`", headers[c])));
                }
                CovariateValue::Numeric(x)
            } else {
                CovariateValue::Categorical(cell.to_string())
            };
            covariates.insert(headers[c].clone(), v);
        }
        out.push(ObservationRecord {
            group_id: group,
            subgroup_ids: sub_cols.iter().map(|&c| r[c].to_string()).collect(),
            response,
            covariates,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Writes records with columns `group, <subgroups>, <response>, <covariates>`.
/// Numbers use 17 significant digits.
pub fn write_records<W: Write>(writer: W, records: &[ObservationRecord], layout: &CsvLayout) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let covariate_names: Vec<String> = records
        .first()
        .map(|r| r.covariates.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = vec![layout.group.clone()];
    header.extend(layout.subgroups.iter().cloned());
    header.push(layout.response.clone());
    header.extend(covariate_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_error)?;
    for r in records {
        let mut row = vec![r.group_id.clone()];
        row.extend(r.subgroup_ids.iter().cloned());
        row.push(format_full(r.response));
        for name in &covariate_names {
            row.push(match r.covariates.get(name) {
                Some(CovariateValue::Numeric(v)) => format_full(*v),
                Some(CovariateValue::Categorical(s)) => s.clone(),
                None => String::new(),
            });
        }
        wtr.write_record(&row).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Full-precision decimal rendering (17 significant digits).
pub fn format_full(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    format!("{v:.16e}")
}
