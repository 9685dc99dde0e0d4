use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::batch::group_by_basin;
use super::ensemble::predict_pooled;
use crate::data::{make_windows, Normalizer, Partition, Period, YearRange};
use crate::error::{Error, Result};
use crate::model::BimModel;

/// Calendar span of one window consumed by the export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpan {
    pub basin_id: String,
    pub first: NaiveDate,
    pub last: NaiveDate,
}

/// Which data an export table was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub period: Period,
    pub years: YearRange,
    pub windows: Vec<WindowSpan>,
}

impl Provenance {
    /// True when every consumed window lies inside the declared years.
    pub fn within_period(&self) -> bool {
        self.windows
            .iter()
            .all(|w| self.years.contains(w.first) && self.years.contains(w.last))
    }
}

/// Per-basin static estimate in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub basin_id: String,
    pub mean: Vec<f64>,
    /// Pooled predictive standard deviation; absent for deterministic runs.
    pub std: Option<Vec<f64>>,
    /// Spread of window-level predictions.
    pub temporal: Vec<f64>,
    pub n_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticEstimates {
    pub static_names: Vec<String>,
    pub rows: Vec<EstimateRow>,
    /// Basins without a complete validation window.
    pub excluded: Vec<String>,
    pub provenance: Option<Provenance>,
}

impl StaticEstimates {
    pub fn get(&self, basin_id: &str) -> Option<&EstimateRow> {
        self.rows.iter().find(|r| r.basin_id == basin_id)
    }
}

/// Averages each basin's predictions over all of its validation-period
/// windows, posterior draws and ensemble members. Only a validation
/// partition is accepted.
#[allow(clippy::too_many_arguments)]
pub fn export_static_estimates(
    members: &[BimModel],
    val: &Partition,
    normalizer: &Normalizer,
    lookback: usize,
    stride: usize,
    draws: usize,
    seed: u64,
) -> Result<StaticEstimates> {
    if val.period != Period::Validation {
        return Err(Error::Contract(format!(
            "static estimates must come from the validation period, got {:?}",
            val.period
        )));
    }
    if !val.dates_within_period() {
        return Err(Error::Contract("partition holds dates outside its validation years".into()));
    }
    if members.is_empty() {
        return Err(Error::arg("no models to export from"));
    }
    let norm = normalizer.apply(&val.data)?;
    let mut windows = Vec::new();
    let mut spans = Vec::new();
    let mut excluded = Vec::new();
    for r in &norm.records {
        let mut ws = make_windows(r, lookback, stride)?;
        if ws.is_empty() {
            log::warn!("basin {} has no complete validation window; excluded", r.basin_id);
            excluded.push(r.basin_id.clone());
            continue;
        }
        for w in &mut ws {
            w.target_statics = None;
            spans.push(WindowSpan {
                basin_id: r.basin_id.clone(),
                first: r.dates[w.start_index],
                last: r.dates[w.start_index + w.length - 1],
            });
        }
        windows.extend(ws);
    }
    let provenance = Provenance {
        period: val.period,
        years: val.years,
        windows: spans,
    };
    if !provenance.within_period() {
        return Err(Error::Contract("an exported window falls outside the validation years".into()));
    }
    let basins = group_by_basin(windows);
    let pooled = predict_pooled(members, &basins, draws, seed)?;
    let rows = pooled
        .into_iter()
        .zip(&basins)
        .map(|(p, b)| EstimateRow {
            basin_id: p.basin_id,
            mean: normalizer.denormalize_statics(&p.mean),
            std: p.has_posterior.then(|| normalizer.denormalize_static_stds(&p.std)),
            temporal: normalizer.denormalize_static_stds(&p.temporal),
            n_windows: b.windows.len(),
        })
        .collect();
    Ok(StaticEstimates {
        static_names: val.data.static_names.clone(),
        rows,
        excluded,
        provenance: Some(provenance),
    })
}

/// Writes `basin_id,<name>_hat,…` plus `<name>_std` columns when every row
/// has them.
pub fn write_estimates_csv(path: &Path, est: &StaticEstimates) -> Result<()> {
    let with_std = !est.rows.is_empty() && est.rows.iter().all(|r| r.std.is_some());
    let mut header = vec!["basin_id".to_string()];
    header.extend(est.static_names.iter().map(|n| format!("{n}_hat")));
    if with_std {
        header.extend(est.static_names.iter().map(|n| format!("{n}_std")));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(&header)?;
    for r in &est.rows {
        let mut rec = vec![r.basin_id.clone()];
        rec.extend(r.mean.iter().map(f64::to_string));
        if with_std {
            rec.extend(r.std.iter().flatten().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::util::write_file(path, &bytes)
}

/// Reads a table written by [`write_estimates_csv`].
pub fn read_estimates_csv(path: &Path) -> Result<StaticEstimates> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    })?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("basin_id") {
        return Err(Error::Schema(format!("{}: first column must be basin_id", path.display())));
    }
    let names: Vec<String> = header[1..]
        .iter()
        .filter_map(|h| h.strip_suffix("_hat").map(str::to_string))
        .collect();
    let d = names.len();
    let with_std = header.len() == 1 + 2 * d;
    if d == 0 || (header.len() != 1 + d && !with_std) {
        return Err(Error::Schema(format!("{}: unexpected estimate columns", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec[k].trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                msg: format!("column {}: {e}", header[k]),
            })
        };
        let mean = (1..=d).map(parse).collect::<Result<Vec<_>>>()?;
        let std = if with_std {
            Some((d + 1..=2 * d).map(parse).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        rows.push(EstimateRow {
            basin_id: rec[0].to_string(),
            mean,
            std,
            temporal: Vec::new(),
            n_windows: 0,
        });
    }
    Ok(StaticEstimates {
        static_names: names,
        rows,
        excluded: Vec::new(),
        provenance: None,
    })
}
