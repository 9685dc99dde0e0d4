use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Mean and (population) standard deviation of one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    /// Set when the column had zero variance and `std` was replaced by 1.
    pub constant: bool,
}

impl ColumnStats {
    fn fit(values: impl Iterator<Item = f64>) -> ColumnStats {
        let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return ColumnStats {
                mean: 0.0,
                std: 1.0,
                constant: true,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 && std.is_finite() {
            ColumnStats {
                mean,
                std,
                constant: false,
            }
        } else {
            ColumnStats {
                mean,
                std: 1.0,
                constant: true,
            }
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }
}

/// Per-column z-score statistics fit on the training partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub drivers: Vec<ColumnStats>,
    pub response: ColumnStats,
    pub statics: Vec<ColumnStats>,
}

impl Normalizer {
    /// Fits on every finite value in `train`; statics come from basins that
    /// have them. Zero-variance columns get `std = 1` and a warning.
    pub fn fit(train: &Dataset) -> Result<Normalizer> {
        if train.records.is_empty() {
            return Err(Error::arg("cannot fit a normalizer on an empty partition"));
        }
        let drivers: Vec<ColumnStats> = (0..train.n_drivers())
            .map(|j| ColumnStats::fit(train.records.iter().flat_map(|r| r.drivers.iter().map(move |row| row[j]))))
            .collect();
        let response = ColumnStats::fit(train.records.iter().flat_map(|r| r.response.iter().copied()));
        let statics: Vec<ColumnStats> = (0..train.n_statics())
            .map(|j| ColumnStats::fit(train.records.iter().filter_map(|r| r.statics.as_ref().map(|s| s[j]))))
            .collect();
        let norm = Normalizer {
            drivers,
            response,
            statics,
        };
        for name in norm.constant_columns(train) {
            log::warn!("column {name} has zero variance on the training partition; std set to 1");
        }
        Ok(norm)
    }

    pub fn constant_columns(&self, ds: &Dataset) -> Vec<String> {
        let mut out = Vec::new();
        for (s, n) in self.drivers.iter().zip(&ds.driver_names) {
            if s.constant {
                out.push(n.clone());
            }
        }
        if self.response.constant {
            out.push("response".into());
        }
        for (s, n) in self.statics.iter().zip(&ds.static_names) {
            if s.constant {
                out.push(n.clone());
            }
        }
        out
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if ds.n_drivers() != self.drivers.len() || ds.n_statics() != self.statics.len() {
            return Err(Error::Schema(format!(
                "normalizer fit on {}/{} columns, dataset has {}/{}",
                self.drivers.len(),
                self.statics.len(),
                ds.n_drivers(),
                ds.n_statics()
            )));
        }
        Ok(())
    }

    fn transform(&self, ds: &Dataset, forward: bool) -> Result<Dataset> {
        self.check(ds)?;
        let f = |s: &ColumnStats, x: f64| if forward { s.apply(x) } else { s.invert(x) };
        let mut out = ds.clone();
        for r in &mut out.records {
            for row in &mut r.drivers {
                for (x, s) in row.iter_mut().zip(&self.drivers) {
                    *x = f(s, *x);
                }
            }
            for y in &mut r.response {
                *y = f(&self.response, *y);
            }
            if let Some(z) = &mut r.statics {
                for (x, s) in z.iter_mut().zip(&self.statics) {
                    *x = f(s, *x);
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.transform(ds, true)
    }

    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        self.transform(ds, false)
    }

    pub fn normalize_statics(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.statics).map(|(&x, s)| s.apply(x)).collect()
    }

    pub fn denormalize_statics(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.statics).map(|(&x, s)| s.invert(x)).collect()
    }

    /// Scales normalized standard deviations back to physical units.
    pub fn denormalize_static_stds(&self, sd: &[f64]) -> Vec<f64> {
        sd.iter().zip(&self.statics).map(|(&x, s)| x * s.std).collect()
    }
}
