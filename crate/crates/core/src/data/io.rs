use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{BasinRecord, Dataset};
use crate::error::{Error, Result};

/// Column labels for the three input tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub drivers: Vec<String>,
    pub statics: Vec<String>,
    #[serde(default = "default_response")]
    pub response: String,
}

fn default_response() -> String {
    "flow".into()
}

impl Default for Schema {
    fn default() -> Self {
        Schema::numbered(5, 27)
    }
}

impl Schema {
    /// `d1..dN` drivers and `s1..sM` statics.
    pub fn numbered(n_drivers: usize, n_statics: usize) -> Self {
        Schema {
            drivers: (1..=n_drivers).map(|i| format!("d{i}")).collect(),
            statics: (1..=n_statics).map(|i| format!("s{i}")).collect(),
            response: default_response(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn parse_value(field: &str, path: &Path, line: u64) -> Result<f64> {
    let f = field.trim();
    if f.is_empty() || f == "NA" {
        return Ok(f64::NAN);
    }
    f.parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("not a number: {f:?}"),
    })
}

fn parse_date(field: &str, path: &Path, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(field.trim(), "%Y-%m-%d").map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad date: {field:?}"),
    })
}

fn open_reader(path: &Path, expected: &[String]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Schema(format!("{}: empty file", path.display())));
    }
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Schema(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            got,
            expected
        )));
    }
    Ok(rdr)
}

type Series = BTreeMap<String, BTreeMap<NaiveDate, Vec<f64>>>;

fn read_series(path: &Path, value_cols: &[String]) -> Result<Series> {
    let mut expected = vec!["basin_id".to_string(), "date".to_string()];
    expected.extend(value_cols.iter().cloned());
    let mut rdr = open_reader(path, &expected)?;
    let mut out: Series = BTreeMap::new();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != expected.len() {
            return Err(Error::Schema(format!(
                "{}:{line}: {} columns, expected {}",
                path.display(),
                rec.len(),
                expected.len()
            )));
        }
        let basin = rec[0].trim().to_string();
        if basin.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "empty basin_id".into(),
            });
        }
        let date = parse_date(&rec[1], path, line)?;
        let values = (2..rec.len())
            .map(|i| parse_value(&rec[i], path, line))
            .collect::<Result<Vec<_>>>()?;
        if out.entry(basin.clone()).or_default().insert(date, values).is_some() {
            return Err(Error::Integrity(format!(
                "{}:{line}: duplicate ({basin}, {date})",
                path.display()
            )));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }
    Ok(out)
}

fn read_statics(path: &Path, names: &[String]) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut expected = vec!["basin_id".to_string()];
    expected.extend(names.iter().cloned());
    let mut rdr = open_reader(path, &expected)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != expected.len() {
            return Err(Error::Schema(format!(
                "{}:{line}: {} columns, expected {}",
                path.display(),
                rec.len(),
                expected.len()
            )));
        }
        let basin = rec[0].trim().to_string();
        let values = (1..rec.len())
            .map(|i| parse_value(&rec[i], path, line))
            .collect::<Result<Vec<_>>>()?;
        if out.insert(basin.clone(), values).is_some() {
            return Err(Error::Integrity(format!("{}:{line}: duplicate basin {basin}", path.display())));
        }
    }
    Ok(out)
}

/// Reads the driver, response and (optional) statics tables and joins them
/// on `(basin_id, date)`. Days present in only one table get `NaN` for the
/// other's columns. Basins are returned in lexicographic id order.
pub fn load_dataset(
    driver_path: &Path,
    response_path: &Path,
    static_path: Option<&Path>,
    schema: &Schema,
) -> Result<Dataset> {
    let drivers = read_series(driver_path, &schema.drivers)?;
    let response = read_series(response_path, std::slice::from_ref(&schema.response))?;
    let mut statics = match static_path {
        Some(p) => read_statics(p, &schema.statics)?,
        None => BTreeMap::new(),
    };

    let basins: Vec<&String> = {
        let mut ids: Vec<&String> = drivers.keys().chain(response.keys()).collect();
        ids.sort();
        ids.dedup();
        ids
    };
    let known: HashSet<&str> = basins.iter().map(|s| s.as_str()).collect();
    for orphan in statics.keys().filter(|k| !known.contains(k.as_str())) {
        log::warn!("statics for basin {orphan} have no time series; ignored");
    }

    let empty = BTreeMap::new();
    let nd = schema.drivers.len();
    let mut records = Vec::with_capacity(basins.len());
    for id in basins {
        let d = drivers.get(id).unwrap_or(&empty);
        let r = response.get(id).unwrap_or(&empty);
        let mut dates: Vec<NaiveDate> = d.keys().chain(r.keys()).copied().collect();
        dates.sort();
        dates.dedup();
        let record = BasinRecord {
            basin_id: id.clone(),
            drivers: dates
                .iter()
                .map(|t| d.get(t).cloned().unwrap_or_else(|| vec![f64::NAN; nd]))
                .collect(),
            response: dates.iter().map(|t| r.get(t).map_or(f64::NAN, |v| v[0])).collect(),
            statics: statics.remove(id.as_str()),
            dates,
        };
        records.push(record);
    }
    Dataset::new(schema.drivers.clone(), schema.statics.clone(), records)
}

/// Shortest round-trip decimal for finite values, `NA` otherwise.
pub(crate) fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".into()
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(PathBuf::from(path), e)
}

pub fn write_drivers_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    writeln!(w, "basin_id,date,{}", ds.driver_names.join(",")).map_err(&e)?;
    for r in &ds.records {
        for (t, date) in r.dates.iter().enumerate() {
            let vals: Vec<String> = r.drivers[t].iter().map(|&v| fmt_value(v)).collect();
            writeln!(w, "{},{},{}", r.basin_id, date.format("%Y-%m-%d"), vals.join(",")).map_err(&e)?;
        }
    }
    w.flush().map_err(&e)
}

pub fn write_response_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    writeln!(w, "basin_id,date,flow").map_err(&e)?;
    for r in &ds.records {
        for (t, date) in r.dates.iter().enumerate() {
            writeln!(w, "{},{},{}", r.basin_id, date.format("%Y-%m-%d"), fmt_value(r.response[t])).map_err(&e)?;
        }
    }
    w.flush().map_err(&e)
}

/// Writes a `basin_id,<names>` table; basins without statics are skipped.
pub fn write_statics_csv(path: &Path, names: &[String], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    writeln!(w, "basin_id,{}", names.join(",")).map_err(&e)?;
    for (id, vals) in rows {
        let vals: Vec<String> = vals.iter().map(|&v| fmt_value(v)).collect();
        writeln!(w, "{id},{}", vals.join(",")).map_err(&e)?;
    }
    w.flush().map_err(&e)
}
