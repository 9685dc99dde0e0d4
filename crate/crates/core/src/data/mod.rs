//! Multi-basin daily time series: records, CSV ingestion, windowing, splits
//! and normalization.

mod io;
mod normalize;
mod split;
mod window;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, write_drivers_csv, write_response_csv, write_statics_csv, Schema};
pub use normalize::{ColumnStats, Normalizer};
pub use split::{split, Partition, Partitions, Period, SplitSpec, YearRange};
pub use window::{make_windows, WindowSample};

/// One basin's daily drivers, response and optional static characteristics.
/// Missing daily values are stored as `NaN`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinRecord {
    pub basin_id: String,
    pub dates: Vec<NaiveDate>,
    /// `T` rows of `D_x` driver values.
    pub drivers: Vec<Vec<f64>>,
    pub response: Vec<f64>,
    pub statics: Option<Vec<f64>>,
}

impl BasinRecord {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn validate(&self, n_drivers: usize, n_statics: usize) -> Result<()> {
        let id = &self.basin_id;
        if self.drivers.len() != self.dates.len() || self.response.len() != self.dates.len() {
            return Err(Error::Integrity(format!(
                "basin {id}: {} dates, {} driver rows, {} responses",
                self.dates.len(),
                self.drivers.len(),
                self.response.len()
            )));
        }
        if let Some(w) = self.dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Integrity(format!(
                "basin {id}: dates not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if let Some(row) = self.drivers.iter().find(|r| r.len() != n_drivers) {
            return Err(Error::Schema(format!(
                "basin {id}: driver row has {} columns, expected {n_drivers}",
                row.len()
            )));
        }
        if let Some(s) = &self.statics {
            if s.len() != n_statics {
                return Err(Error::Schema(format!(
                    "basin {id}: {} statics, expected {n_statics}",
                    s.len()
                )));
            }
        }
        Ok(())
    }

    /// Restricts the record to dates inside `range`.
    pub fn slice_years(&self, range: &YearRange) -> BasinRecord {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| range.contains(self.dates[i])).collect();
        BasinRecord {
            basin_id: self.basin_id.clone(),
            dates: idx.iter().map(|&i| self.dates[i]).collect(),
            drivers: idx.iter().map(|&i| self.drivers[i].clone()).collect(),
            response: idx.iter().map(|&i| self.response[i]).collect(),
            statics: self.statics.clone(),
        }
    }

    /// Whether day `t` has every driver and the response present.
    pub fn row_complete(&self, t: usize) -> bool {
        self.response[t].is_finite() && self.drivers[t].iter().all(|v| v.is_finite())
    }
}

/// A set of basins sharing driver and static column layouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub driver_names: Vec<String>,
    pub static_names: Vec<String>,
    pub records: Vec<BasinRecord>,
}

impl Dataset {
    pub fn new(driver_names: Vec<String>, static_names: Vec<String>, records: Vec<BasinRecord>) -> Result<Self> {
        let ds = Dataset {
            driver_names,
            static_names,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.basin_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate basin {}", r.basin_id)));
            }
            r.validate(self.n_drivers(), self.n_statics())?;
        }
        Ok(())
    }

    pub fn n_drivers(&self) -> usize {
        self.driver_names.len()
    }

    pub fn n_statics(&self) -> usize {
        self.static_names.len()
    }

    pub fn basin_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.basin_id.clone()).collect()
    }

    pub fn get(&self, basin_id: &str) -> Option<&BasinRecord> {
        self.records.iter().find(|r| r.basin_id == basin_id)
    }

    pub fn with_records(&self, records: Vec<BasinRecord>) -> Dataset {
        Dataset {
            driver_names: self.driver_names.clone(),
            static_names: self.static_names.clone(),
            records,
        }
    }
}
