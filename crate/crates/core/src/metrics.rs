//! Evaluation metrics: Nash–Sutcliffe efficiency, interval coverage, RMS
//! calibration error, dispersion, and report assembly.
//!
//! Metrics that can be undefined (zero observed variance, zero mean σ) return
//! `Ok(None)` so that aggregation can skip them; misuse such as mismatched
//! lengths is an error.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::training::StaticEstimates;

/// One-standard-deviation interval (nominal 68.27%).
pub const Z_ONE_SIGMA: f64 = 1.0;
/// Nominal 95% interval.
pub const Z_95: f64 = 1.96;

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::arg(format!("{what}: lengths differ ({a} vs {b})")));
    }
    Ok(())
}

/// `1 − Σ(Q−Q̂)² / Σ(Q−Q̄)²`. `None` when the observations are constant.
pub fn nse(observed: &[f64], predicted: &[f64]) -> Result<Option<f64>> {
    check_len("nse", observed.len(), predicted.len())?;
    if observed.len() < 2 {
        return Err(Error::arg("nse needs at least 2 observations"));
    }
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let ss_tot: f64 = observed.iter().map(|q| (q - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = observed.iter().zip(predicted).map(|(q, p)| (q - p).powi(2)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// Fraction of observations inside `[μ − zσ, μ + zσ]`, bounds inclusive.
pub fn coverage_rate(observed: &[f64], mean: &[f64], std: &[f64], z_alpha: f64) -> Result<f64> {
    check_len("coverage_rate", observed.len(), mean.len())?;
    check_len("coverage_rate", observed.len(), std.len())?;
    if observed.is_empty() {
        return Err(Error::arg("coverage_rate needs at least one observation"));
    }
    if !(z_alpha > 0.0) {
        return Err(Error::arg(format!("z_alpha must be positive, got {z_alpha}")));
    }
    if std.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::arg("standard deviations must be non-negative"));
    }
    let hit = observed
        .iter()
        .zip(mean.iter().zip(std))
        .filter(|(z, (m, s))| (*z - *m).abs() <= z_alpha * *s)
        .count();
    Ok(hit as f64 / observed.len() as f64)
}

/// Percentiles `0.05, 0.10, …, 0.95`.
pub fn default_percentile_grid() -> Vec<f64> {
    (1..=19).map(|j| j as f64 * 0.05).collect()
}

/// Root mean square over the grid of `p − (fraction of observations at or
/// below the Gaussian p-quantile μ + Φ⁻¹(p)·σ)`.
pub fn rms_calibration_error(observed: &[f64], mean: &[f64], std: &[f64], grid: &[f64]) -> Result<f64> {
    check_len("rms_calibration_error", observed.len(), mean.len())?;
    check_len("rms_calibration_error", observed.len(), std.len())?;
    if grid.is_empty() {
        return Err(Error::arg("percentile grid is empty"));
    }
    if let Some(p) = grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::arg(format!("percentile {p} outside (0, 1)")));
    }
    if observed.is_empty() {
        return Err(Error::arg("rms_calibration_error needs at least one observation"));
    }
    let std_normal = Normal::standard();
    let n = observed.len() as f64;
    let mut sq = 0.0;
    for &p in grid {
        let q = std_normal.inverse_cdf(p);
        let below = observed
            .iter()
            .zip(mean.iter().zip(std))
            .filter(|(z, (m, s))| **z <= *m + q * *s)
            .count();
        sq += (p - below as f64 / n).powi(2);
    }
    Ok((sq / grid.len() as f64).sqrt())
}

/// Population standard deviation of `σ` over its mean. `None` when the mean is
/// zero.
pub fn dispersion(stds: &[f64]) -> Result<Option<f64>> {
    if stds.is_empty() {
        return Err(Error::arg("dispersion needs at least one value"));
    }
    if stds.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::arg("standard deviations must be non-negative"));
    }
    let n = stds.len() as f64;
    let mean = stds.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(None);
    }
    // Spread is taken about the first value so that equal inputs give
    // exactly zero.
    let shift = stds[0];
    let d = mean - shift;
    let var = (stds.iter().map(|s| (s - shift).powi(2)).sum::<f64>() / n - d * d).max(0.0);
    Ok(Some(var.sqrt() / mean))
}

/// Mean full width `2zσ` of the intervals.
pub fn mean_interval_width(std: &[f64], z_alpha: f64) -> Result<f64> {
    if std.is_empty() {
        return Err(Error::arg("mean_interval_width needs at least one value"));
    }
    Ok(2.0 * z_alpha * std.iter().sum::<f64>() / std.len() as f64)
}

/// Median of a non-empty slice.
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Mean of a non-empty slice.
pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub z_alpha: f64,
    pub rate: f64,
    pub mean_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicMetrics {
    pub name: String,
    pub n: usize,
    /// Equal to R² of predicted against observed values.
    pub nse: Option<f64>,
    /// Present only when the run has predictive standard deviations.
    pub coverage: Option<Vec<Coverage>>,
    pub rms_calibration_error: Option<f64>,
    pub dispersion: Option<f64>,
    pub mean_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mean_nse: Option<f64>,
    pub median_nse: Option<f64>,
    /// Characteristics whose NSE is undefined.
    pub undefined_nse: Vec<String>,
    /// Mean over characteristics of each characteristic's coverage.
    pub coverage_mean_over_characteristics: Option<Vec<Coverage>>,
    /// Coverage over all `(basin, characteristic)` pairs.
    pub coverage_pooled: Option<Vec<Coverage>>,
    pub rms_calibration_error_pooled: Option<f64>,
    pub mean_dispersion: Option<f64>,
}

/// Per-basin and aggregate forward-model skill of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardMetrics {
    pub per_basin: Vec<(String, Option<f64>)>,
    pub median_nse: Option<f64>,
    pub mean_nse: Option<f64>,
    /// Basins with constant observed response.
    pub undefined: Vec<String>,
}

/// Skill of several forward runs and of their mean prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardSummary {
    pub runs: Vec<ForwardMetrics>,
    /// Mean over runs of the per-run median NSE.
    pub average_nse_median: Option<f64>,
    /// Mean over runs of the per-run mean NSE.
    pub average_nse_mean: Option<f64>,
    pub ensemble: ForwardMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub per_characteristic: Vec<CharacteristicMetrics>,
    pub aggregate: AggregateMetrics,
    pub forward: Option<ForwardSummary>,
    pub config: serde_json::Value,
}

impl UncertaintyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per characteristic plus an `aggregate` row.
    pub fn to_csv(&self) -> Result<String> {
        let zs: Vec<f64> = self
            .per_characteristic
            .iter()
            .find_map(|c| c.coverage.as_ref())
            .map(|c| c.iter().map(|x| x.z_alpha).collect())
            .unwrap_or_default();
        let mut header = vec!["characteristic".to_string(), "n".into(), "nse".into()];
        for z in &zs {
            header.push(format!("coverage_z{z}"));
            header.push(format!("width_z{z}"));
        }
        header.extend(["rms_calibration_error".into(), "dispersion".into(), "mean_std".into()]);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.per_characteristic {
            let mut rec = vec![c.name.clone(), c.n.to_string(), opt(c.nse)];
            for (k, _) in zs.iter().enumerate() {
                let cov = c.coverage.as_ref().and_then(|v| v.get(k));
                rec.push(opt(cov.map(|x| x.rate)));
                rec.push(opt(cov.map(|x| x.mean_width)));
            }
            rec.extend([opt(c.rms_calibration_error), opt(c.dispersion), opt(c.mean_std)]);
            w.write_record(&rec)?;
        }
        let a = &self.aggregate;
        let mut rec = vec!["aggregate".to_string(), String::new(), opt(a.median_nse)];
        for (k, _) in zs.iter().enumerate() {
            let cov = a.coverage_pooled.as_ref().and_then(|v| v.get(k));
            rec.push(opt(cov.map(|x| x.rate)));
            rec.push(String::new());
        }
        rec.extend([opt(a.rms_calibration_error_pooled), opt(a.mean_dispersion), String::new()]);
        w.write_record(&rec)?;
        let bytes = w.into_inner().map_err(|e| Error::Integrity(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Integrity(e.to_string()))
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        crate::util::write_file(json_path, self.to_json()?.as_bytes())?;
        crate::util::write_file(csv_path, self.to_csv()?.as_bytes())
    }
}

/// Scores static estimates against observed characteristics. The basin sets
/// must agree exactly; coverage columns appear only when every estimate row
/// carries standard deviations.
pub fn assemble_report(
    estimates: &StaticEstimates,
    observed: &[(String, Vec<f64>)],
    forward: Option<ForwardSummary>,
    config: serde_json::Value,
) -> Result<UncertaintyReport> {
    let est_ids: BTreeSet<&str> = estimates.rows.iter().map(|r| r.basin_id.as_str()).collect();
    let obs_ids: BTreeSet<&str> = observed.iter().map(|(b, _)| b.as_str()).collect();
    if est_ids != obs_ids || est_ids.len() != estimates.rows.len() || obs_ids.len() != observed.len() {
        let missing: Vec<&str> = obs_ids.difference(&est_ids).copied().collect();
        let extra: Vec<&str> = est_ids.difference(&obs_ids).copied().collect();
        return Err(Error::Integrity(format!(
            "estimate and observation basins differ: missing estimates {missing:?}, unexpected estimates {extra:?}"
        )));
    }
    let d = estimates.static_names.len();
    if let Some((b, _)) = observed.iter().find(|(_, z)| z.len() != d) {
        return Err(Error::Schema(format!("basin {b}: observed statics do not have {d} values")));
    }
    if observed.is_empty() {
        return Err(Error::arg("no basins to evaluate"));
    }
    let with_std = estimates.rows.iter().all(|r| r.std.is_some());
    let zs = [Z_ONE_SIGMA, Z_95];
    let grid = default_percentile_grid();

    let mut per = Vec::with_capacity(d);
    let (mut all_obs, mut all_mean, mut all_std) = (Vec::new(), Vec::new(), Vec::new());
    for (j, name) in estimates.static_names.iter().enumerate() {
        let mut obs = Vec::new();
        let mut mu = Vec::new();
        let mut sd = Vec::new();
        for (b, z) in observed {
            let row = estimates.get(b).expect("basin sets checked above");
            obs.push(z[j]);
            mu.push(row.mean[j]);
            if let Some(s) = &row.std {
                sd.push(s[j]);
            }
        }
        let n = obs.len();
        let nse_j = if n >= 2 { nse(&obs, &mu)? } else { None };
        let (coverage, rmsce, disp, mean_std) = if with_std {
            let cov = zs
                .iter()
                .map(|&z| {
                    Ok(Coverage {
                        z_alpha: z,
                        rate: coverage_rate(&obs, &mu, &sd, z)?,
                        mean_width: mean_interval_width(&sd, z)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (
                Some(cov),
                Some(rms_calibration_error(&obs, &mu, &sd, &grid)?),
                dispersion(&sd)?,
                mean(&sd),
            )
        } else {
            (None, None, None, None)
        };
        all_obs.extend_from_slice(&obs);
        all_mean.extend_from_slice(&mu);
        all_std.extend_from_slice(&sd);
        per.push(CharacteristicMetrics {
            name: name.clone(),
            n,
            nse: nse_j,
            coverage,
            rms_calibration_error: rmsce,
            dispersion: disp,
            mean_std,
        });
    }

    let defined: Vec<f64> = per.iter().filter_map(|c| c.nse).collect();
    let undefined_nse = per.iter().filter(|c| c.nse.is_none()).map(|c| c.name.clone()).collect();
    let (coverage_mean, coverage_pooled, rmsce_pooled) = if with_std {
        let mean_cov = zs
            .iter()
            .enumerate()
            .map(|(k, &z)| {
                let rates: Vec<f64> = per.iter().filter_map(|c| c.coverage.as_ref().map(|v| v[k].rate)).collect();
                let widths: Vec<f64> = per
                    .iter()
                    .filter_map(|c| c.coverage.as_ref().map(|v| v[k].mean_width))
                    .collect();
                Coverage {
                    z_alpha: z,
                    rate: mean(&rates).unwrap_or(f64::NAN),
                    mean_width: mean(&widths).unwrap_or(f64::NAN),
                }
            })
            .collect();
        let pooled = zs
            .iter()
            .map(|&z| {
                Ok(Coverage {
                    z_alpha: z,
                    rate: coverage_rate(&all_obs, &all_mean, &all_std, z)?,
                    mean_width: mean_interval_width(&all_std, z)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        (
            Some(mean_cov),
            Some(pooled),
            Some(rms_calibration_error(&all_obs, &all_mean, &all_std, &grid)?),
        )
    } else {
        (None, None, None)
    };
    let disps: Vec<f64> = per.iter().filter_map(|c| c.dispersion).collect();
    Ok(UncertaintyReport {
        aggregate: AggregateMetrics {
            mean_nse: mean(&defined),
            median_nse: median(&defined),
            undefined_nse,
            coverage_mean_over_characteristics: coverage_mean,
            coverage_pooled,
            rms_calibration_error_pooled: rmsce_pooled,
            mean_dispersion: mean(&disps),
        },
        per_characteristic: per,
        forward,
        config,
    })
}
