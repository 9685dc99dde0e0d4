//! Linear-reservoir basins with known parameters, used as ground truth.
//!
//! Each basin is a single bucket with storage `S`. Per day, outflow is
//! `k·S`, evapotranspiration is `et_coeff·E` limited to the water left after
//! outflow, and storage above `c_max` spills into the outflow.

use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_drivers_csv, write_response_csv, write_statics_csv, BasinRecord, Dataset, Schema};
use crate::error::{Error, Result};
use crate::util::derive_seed;

pub const K_RANGE: (f64, f64) = (0.01, 0.3);
pub const C_MAX_RANGE: (f64, f64) = (50.0, 400.0);
pub const ET_RANGE: (f64, f64) = (0.2, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketParams {
    /// Outflow coefficient per day.
    pub k: f64,
    /// Storage capacity in mm.
    pub c_max: f64,
    pub et_coeff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketTrace {
    /// `T + 1` storages, starting with `S_0`.
    pub storage: Vec<f64>,
    /// Total outflow per day, including overflow.
    pub outflow: Vec<f64>,
    pub et_actual: Vec<f64>,
    pub overflow: Vec<f64>,
}

pub fn simulate_bucket(params: &BucketParams, p: &[f64], e: &[f64], s0: f64) -> Result<BucketTrace> {
    if p.len() != e.len() {
        return Err(Error::arg("precipitation and evaporation lengths differ"));
    }
    if p.iter().chain(e).any(|x| !(*x >= 0.0)) || !(s0 >= 0.0) {
        return Err(Error::arg("bucket inputs must be non-negative"));
    }
    if !(params.k > 0.0 && params.k <= 1.0) || !(params.c_max > 0.0) || !(0.0..=1.0).contains(&params.et_coeff) {
        return Err(Error::arg(format!("invalid bucket parameters {params:?}")));
    }
    let n = p.len();
    let mut storage = Vec::with_capacity(n + 1);
    let mut outflow = Vec::with_capacity(n);
    let mut et_actual = Vec::with_capacity(n);
    let mut overflow = Vec::with_capacity(n);
    let mut s = s0.min(params.c_max);
    storage.push(s);
    for t in 0..n {
        let q = params.k * s;
        let avail = s - q;
        let et = (params.et_coeff * e[t]).min(avail);
        // `avail - et` is exactly 0 when evaporation takes everything.
        let mut next = (avail - et) + p[t];
        let spill = (next - params.c_max).max(0.0);
        next -= spill;
        outflow.push(q + spill);
        et_actual.push(et);
        overflow.push(spill);
        s = next;
        storage.push(s);
    }
    Ok(BucketTrace {
        storage,
        outflow,
        et_actual,
        overflow,
    })
}

/// Gaussian noise added to one observed static column (the ground truth
/// stays clean).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelNoise {
    pub column: String,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_basins: usize,
    pub n_days: usize,
    pub seed: u64,
    pub start_date: NaiveDate,
    /// Independent uniform(0, 1) statics appended after the bucket
    /// parameters.
    pub n_distractors: usize,
    /// Standard-normal driver columns unrelated to the response.
    pub n_noise_drivers: usize,
    /// `σ` of the multiplicative lognormal observation error.
    pub obs_noise: f64,
    pub label_noise: Vec<LabelNoise>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_basins: 50,
            n_days: 3650,
            seed: 0,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            n_distractors: 24,
            n_noise_drivers: 3,
            obs_noise: 0.1,
            label_noise: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub params: Vec<BucketParams>,
    /// Noise-free statics in dataset column order.
    pub truth: Vec<Vec<f64>>,
    /// Noise-free outflow per basin.
    pub clean_response: Vec<Vec<f64>>,
}

impl SyntheticDataset {
    /// Writes `drivers.csv`, `response.csv`, `statics.csv`, `truth.csv`
    /// and the matching `schema.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let ds = &self.dataset;
        let schema = Schema {
            drivers: ds.driver_names.clone(),
            statics: ds.static_names.clone(),
            response: "flow".into(),
        };
        crate::util::write_file(&dir.join("schema.json"), serde_json::to_string_pretty(&schema)?.as_bytes())?;
        write_drivers_csv(&dir.join("drivers.csv"), ds)?;
        write_response_csv(&dir.join("response.csv"), ds)?;
        let observed: Vec<(String, Vec<f64>)> = ds
            .records
            .iter()
            .map(|r| (r.basin_id.clone(), r.statics.clone().unwrap_or_default()))
            .collect();
        write_statics_csv(&dir.join("statics.csv"), &ds.static_names, &observed)?;
        let truth: Vec<(String, Vec<f64>)> = ds
            .records
            .iter()
            .zip(&self.truth)
            .map(|(r, t)| (r.basin_id.clone(), t.clone()))
            .collect();
        write_statics_csv(&dir.join("truth.csv"), &ds.static_names, &truth)
    }
}

pub fn static_names(n_distractors: usize) -> Vec<String> {
    let mut names = vec!["k".to_string(), "c_max".into(), "et_coeff".into()];
    names.extend((1..=n_distractors).map(|i| format!("distractor_{i}")));
    names
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Seasonal wet-day occurrence with exponential amounts; the basin's
/// `wetness` scales the amounts.
fn precipitation(rng: &mut impl Rng, n: usize, wetness: f64) -> Vec<f64> {
    let amount = Exp::new(1.0 / 8.0).expect("positive rate");
    (0..n)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * t as f64 / 365.25;
            let p_wet = 0.3 + 0.15 * phase.sin();
            if rng.gen::<f64>() < p_wet {
                wetness * amount.sample(rng)
            } else {
                0.0
            }
        })
        .collect()
}

fn evaporation(rng: &mut impl Rng, n: usize, mean: f64) -> Vec<f64> {
    (0..n)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * (t as f64 - 80.0) / 365.25;
            let noise: f64 = rng.sample(StandardNormal);
            (mean * (1.0 + 0.8 * phase.sin()) + 0.2 * noise).max(0.0)
        })
        .collect()
}

pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.n_basins < 2 || cfg.n_days < 730 {
        return Err(Error::arg(format!(
            "need at least 2 basins and 730 days, got {} and {}",
            cfg.n_basins, cfg.n_days
        )));
    }
    if !(cfg.obs_noise >= 0.0) {
        return Err(Error::arg("observation noise must be non-negative"));
    }
    let names = static_names(cfg.n_distractors);
    let noisy: Vec<(usize, f64)> = cfg
        .label_noise
        .iter()
        .map(|l| {
            names
                .iter()
                .position(|n| *n == l.column)
                .map(|i| (i, l.std))
                .ok_or_else(|| Error::arg(format!("unknown static column {:?}", l.column)))
        })
        .collect::<Result<_>>()?;
    let dates: Vec<NaiveDate> = cfg.start_date.iter_days().take(cfg.n_days).collect();
    let width = (cfg.n_basins - 1).to_string().len().max(3);
    let mut records = Vec::with_capacity(cfg.n_basins);
    let mut params = Vec::with_capacity(cfg.n_basins);
    let mut truth = Vec::with_capacity(cfg.n_basins);
    let mut clean = Vec::with_capacity(cfg.n_basins);
    for b in 0..cfg.n_basins {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, b as u64));
        let bp = BucketParams {
            k: uniform(&mut rng, K_RANGE),
            c_max: uniform(&mut rng, C_MAX_RANGE),
            et_coeff: uniform(&mut rng, ET_RANGE),
        };
        let wetness = uniform(&mut rng, (0.7, 1.3));
        let e_mean = uniform(&mut rng, (1.5, 3.0));
        let spin = 365;
        let p = precipitation(&mut rng, cfg.n_days + spin, wetness);
        let e = evaporation(&mut rng, cfg.n_days + spin, e_mean);
        let warm = simulate_bucket(&bp, &p[..spin], &e[..spin], 0.5 * bp.c_max)?;
        let trace = simulate_bucket(&bp, &p[spin..], &e[spin..], *warm.storage.last().expect("non-empty"))?;
        let mut drivers = Vec::with_capacity(cfg.n_days);
        for t in 0..cfg.n_days {
            let mut row = vec![p[spin + t], e[spin + t]];
            row.extend((0..cfg.n_noise_drivers).map(|_| rng.sample::<f64, _>(StandardNormal)));
            drivers.push(row);
        }
        let response: Vec<f64> = trace
            .outflow
            .iter()
            .map(|q| q * (cfg.obs_noise * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let mut z = vec![bp.k, bp.c_max, bp.et_coeff];
        z.extend((0..cfg.n_distractors).map(|_| rng.gen::<f64>()));
        let mut observed = z.clone();
        for &(i, sd) in &noisy {
            observed[i] += sd * rng.sample::<f64, _>(StandardNormal);
        }
        records.push(BasinRecord {
            basin_id: format!("basin_{b:0width$}"),
            dates: dates.clone(),
            drivers,
            response,
            statics: Some(observed),
        });
        params.push(bp);
        truth.push(z);
        clean.push(trace.outflow);
    }
    let mut driver_names = vec!["precip".to_string(), "pet".into()];
    driver_names.extend((1..=cfg.n_noise_drivers).map(|i| format!("noise_{i}")));
    Ok(SyntheticDataset {
        dataset: Dataset::new(driver_names, names, records)?,
        params,
        truth,
        clean_response: clean,
    })
}

/// Estimates `k` from daily precipitation, evaporation and outflow by
/// regressing `Q_{t+1}` on `Q_t` and `E_t` over dry recession days, where the
/// bucket gives `Q_{t+1} = (1 − k)·Q_t − k·et_coeff·E_t` unless evaporation
/// empties it.
pub fn recession_k(p: &[f64], e: &[f64], q: &[f64]) -> Result<f64> {
    let n = p.len().min(e.len()).min(q.len());
    let mut sorted: Vec<f64> = q[..n].to_vec();
    sorted.sort_by(f64::total_cmp);
    let floor = sorted[n / 2];
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut used = 0;
    for t in 0..n.saturating_sub(1) {
        // A dry day whose evaporation empties the bucket ends at exactly
        // zero outflow and follows a different law.
        if p[t] == 0.0 && q[t + 1] < q[t] && q[t + 1] > 0.0 && q[t] > floor {
            let (x, y, z) = (q[t], e[t], q[t + 1]);
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
            sxz += x * z;
            syz += y * z;
            used += 1;
        }
    }
    let det = sxx * syy - sxy * sxy;
    if used < 10 || det.abs() < 1e-300 {
        return Err(Error::arg("too few recession days to estimate k"));
    }
    let a = (sxz * syy - syz * sxy) / det;
    Ok(1.0 - a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: f64) -> BucketParams {
        BucketParams {
            k,
            c_max: 1e9,
            et_coeff: 0.5,
        }
    }

    #[test]
    fn dry_empty_bucket_stays_empty() {
        let t = simulate_bucket(&params(0.01), &[0.0; 20], &[0.0; 20], 0.0).unwrap();
        assert!(t.outflow.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn geometric_recession() {
        let t = simulate_bucket(&params(0.5), &[0.0; 6], &[0.0; 6], 1.0).unwrap();
        for (i, q) in t.outflow.iter().enumerate() {
            assert!((q - 0.5f64.powi(i as i32 + 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn overflow_and_negative_inputs() {
        let bp = BucketParams {
            k: 0.1,
            c_max: 10.0,
            et_coeff: 0.0,
        };
        let t = simulate_bucket(&bp, &[20.0], &[0.0], 5.0).unwrap();
        assert!((t.overflow[0] - 14.5).abs() < 1e-12);
        assert_eq!(t.storage[1], 10.0);
        assert!(simulate_bucket(&bp, &[-1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn et_never_overdraws_storage() {
        let bp = BucketParams {
            k: 0.3,
            c_max: 100.0,
            et_coeff: 1.0,
        };
        let t = simulate_bucket(&bp, &[0.0; 10], &[50.0; 10], 10.0).unwrap();
        assert!(t.storage.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = SyntheticConfig {
            n_basins: 4,
            n_days: 800,
            seed: 11,
            n_distractors: 2,
            ..Default::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.records.len(), 4);
        assert_eq!(a.dataset.n_statics(), 5);
        assert_eq!(a.dataset.n_drivers(), 5);
        assert_eq!(a.dataset.records[0].len(), 800);
        assert!(generate_dataset(&SyntheticConfig { n_days: 100, ..cfg }).is_err());
    }

    #[test]
    fn label_noise_touches_only_observed_column() {
        let cfg = SyntheticConfig {
            n_basins: 3,
            n_days: 730,
            n_distractors: 1,
            label_noise: vec![LabelNoise {
                column: "c_max".into(),
                std: 10.0,
            }],
            ..Default::default()
        };
        let s = generate_dataset(&cfg).unwrap();
        for (r, t) in s.dataset.records.iter().zip(&s.truth) {
            let z = r.statics.as_ref().unwrap();
            assert_eq!(z[0], t[0]);
            assert_ne!(z[1], t[1]);
        }
    }
}
