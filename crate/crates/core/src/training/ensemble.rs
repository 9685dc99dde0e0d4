use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::BasinWindows;
use super::inverse::{InverseData, InverseTrainer};
use super::{RunManifest, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{temporal_uncertainty, ubl_penalty_vector, PenaltyVector};
use crate::model::{BimConfig, BimModel, Layer, LayerNoise, Mode, PosteriorSampleSet};
use crate::util::derive_seed;

/// Environment variable capping the number of members trained at once.
pub const THREADS_ENV: &str = "INVERSE_UQ_THREADS";

/// Worker count for ensemble training: the env override if it parses to a
/// positive integer, else the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One member's predictions for one basin, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberPrediction {
    pub basin_id: String,
    /// Posterior-mean prediction of every window.
    pub window_means: Vec<Vec<f64>>,
    /// Posterior mean of the window-averaged prediction.
    pub mean: Vec<f64>,
    /// Draws of the window-averaged prediction; `None` for deterministic
    /// models.
    pub draws: Option<PosteriorSampleSet>,
}

const ENCODE_CHUNK: usize = 64;

/// Encodes every window of every basin, then averages the regressor output
/// over each basin's windows, once at the posterior means and once per
/// weight draw (a draw is shared by all windows).
pub fn predict_member(model: &BimModel, basins: &[BasinWindows], draws: usize, seed: u64) -> Result<Vec<MemberPrediction>> {
    let all: Vec<&Tensor> = basins.iter().flat_map(|b| b.windows.iter().map(|w| &w.inputs)).collect();
    if all.is_empty() {
        return Ok(Vec::new());
    }
    let mut hs = Vec::with_capacity(all.len());
    for chunk in all.chunks(ENCODE_CHUNK) {
        let enc = model.encode_batch(chunk)?;
        for i in 0..chunk.len() {
            hs.push(enc.h.row_slice(i).to_vec());
        }
    }
    let h = Tensor::from_rows(&hs)?;
    let basin_means = |z: &Tensor| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(basins.len());
        let mut row = 0;
        for b in basins {
            let mut m = vec![0.0; z.cols()];
            for _ in &b.windows {
                for (a, x) in m.iter_mut().zip(z.row_slice(row)) {
                    *a += x;
                }
                row += 1;
            }
            m.iter_mut().for_each(|a| *a /= b.windows.len() as f64);
            out.push(m);
        }
        out
    };
    let z_mean = model.regress_with(&h, None)?;
    let means = basin_means(&z_mean);
    let mut sampled: Vec<Vec<Vec<f64>>> = vec![Vec::new(); basins.len()];
    if model.mode() == Mode::Bayesian {
        let Layer::Variational(v) = &model.reg_out else {
            return Err(Error::Contract("bayesian model without a variational head".into()));
        };
        if draws < 2 {
            return Err(Error::arg("need at least 2 posterior draws"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..draws {
            let noise = LayerNoise::sample(v.input_size, v.output_size, &mut rng);
            let z = model.regress_with(&h, Some(&noise))?;
            for (s, m) in sampled.iter_mut().zip(basin_means(&z)) {
                s.push(m);
            }
        }
    }
    let mut out = Vec::with_capacity(basins.len());
    let mut row = 0;
    for ((b, mean), s) in basins.iter().zip(means).zip(sampled) {
        let window_means = (0..b.windows.len()).map(|k| z_mean.row_slice(row + k).to_vec()).collect();
        row += b.windows.len();
        out.push(MemberPrediction {
            basin_id: b.basin_id.clone(),
            window_means,
            mean,
            draws: if s.is_empty() { None } else { Some(PosteriorSampleSet::from_draws(s)?) },
        });
    }
    Ok(out)
}

/// Ensemble prediction for one basin, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledPrediction {
    pub basin_id: String,
    /// Mean of the member means.
    pub mean: Vec<f64>,
    /// Mean of the members' posterior variances.
    pub var_within: Vec<f64>,
    /// Population variance of the member means.
    pub var_between: Vec<f64>,
    /// `sqrt(var_within + var_between)`.
    pub std: Vec<f64>,
    /// Mixture covariance: mean member covariance plus covariance of member
    /// means.
    pub cov: Vec<Vec<f64>>,
    /// Member-averaged window predictions.
    pub window_means: Vec<Vec<f64>>,
    /// Spread of `window_means` around their mean.
    pub temporal: Vec<f64>,
    pub member_means: Vec<Vec<f64>>,
    pub has_posterior: bool,
}

/// Combines per-member predictions (outer index = member) basin by basin.
pub fn pool_predictions(per_member: &[Vec<MemberPrediction>]) -> Result<Vec<PooledPrediction>> {
    let first = per_member.first().ok_or_else(|| Error::arg("no ensemble members"))?;
    let m = per_member.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (i, p0) in first.iter().enumerate() {
        let d = p0.mean.len();
        let preds: Vec<&MemberPrediction> = per_member
            .iter()
            .map(|mp| {
                mp.get(i)
                    .filter(|p| p.basin_id == p0.basin_id && p.window_means.len() == p0.window_means.len())
                    .ok_or_else(|| Error::Integrity(format!("members disagree on basin {}", p0.basin_id)))
            })
            .collect::<Result<_>>()?;
        let mean: Vec<f64> = (0..d).map(|j| preds.iter().map(|p| p.mean[j]).sum::<f64>() / m).collect();
        let has_posterior = preds.iter().all(|p| p.draws.is_some());
        let mut cov = vec![vec![0.0; d]; d];
        for p in &preds {
            for a in 0..d {
                for b in 0..d {
                    let within = p.draws.as_ref().map_or(0.0, |s| s.cov[a][b]);
                    cov[a][b] += (within + (p.mean[a] - mean[a]) * (p.mean[b] - mean[b])) / m;
                }
            }
        }
        let var_within: Vec<f64> = (0..d)
            .map(|j| preds.iter().map(|p| p.draws.as_ref().map_or(0.0, |s| s.cov[j][j])).sum::<f64>() / m)
            .collect();
        let var_between: Vec<f64> = (0..d)
            .map(|j| preds.iter().map(|p| (p.mean[j] - mean[j]).powi(2)).sum::<f64>() / m)
            .collect();
        let std = var_within.iter().zip(&var_between).map(|(a, b)| (a + b).max(0.0).sqrt()).collect();
        let window_means: Vec<Vec<f64>> = (0..p0.window_means.len())
            .map(|k| (0..d).map(|j| preds.iter().map(|p| p.window_means[k][j]).sum::<f64>() / m).collect())
            .collect();
        let wm_mean: Vec<f64> = (0..d)
            .map(|j| window_means.iter().map(|w| w[j]).sum::<f64>() / window_means.len() as f64)
            .collect();
        let temporal = temporal_uncertainty(&window_means, &wm_mean)?.unc;
        out.push(PooledPrediction {
            basin_id: p0.basin_id.clone(),
            mean,
            var_within,
            var_between,
            std,
            cov,
            window_means,
            temporal,
            member_means: preds.iter().map(|p| p.mean.clone()).collect(),
            has_posterior,
        });
    }
    Ok(out)
}

/// Basin-averaged mixture covariance. With one member this is the average of
/// the per-basin posterior covariances.
pub fn pooled_uncertainty_matrix(pooled: &[PooledPrediction]) -> Result<Vec<Vec<f64>>> {
    let first = pooled.first().ok_or_else(|| Error::arg("uncertainty matrix over no basins"))?;
    let d = first.mean.len();
    let mut acc = vec![vec![0.0; d]; d];
    for p in pooled {
        for (a, c) in acc.iter_mut().zip(&p.cov) {
            for (x, y) in a.iter_mut().zip(c) {
                *x += y / pooled.len() as f64;
            }
        }
    }
    Ok(acc)
}

/// Trained ensemble members with their manifests.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<BimModel>,
    pub manifests: Vec<RunManifest>,
    /// Shared penalty of the uncertainty-weighted phase, if it ran.
    pub penalty: Option<PenaltyVector>,
    /// Snapshot of every member at the end of phase 1 when the
    /// uncertainty-weighted phase ran.
    pub phase1_members: Option<Vec<BimModel>>,
}

impl Ensemble {
    /// Pooled predictions for `basins` with `draws` posterior samples per
    /// member.
    pub fn predict(&self, basins: &[BasinWindows], draws: usize, seed: u64) -> Result<Vec<PooledPrediction>> {
        predict_pooled(&self.members, basins, draws, seed)
    }
}

pub(crate) fn predict_pooled(
    members: &[BimModel],
    basins: &[BasinWindows],
    draws: usize,
    seed: u64,
) -> Result<Vec<PooledPrediction>> {
    let per: Vec<Vec<MemberPrediction>> = members
        .iter()
        .enumerate()
        .map(|(k, m)| predict_member(m, basins, draws, derive_seed(seed, k as u64)))
        .collect::<Result<_>>()?;
    pool_predictions(&per)
}

fn parallel_map<T: Send, U: Send>(items: Vec<T>, f: impl Fn(T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let cap = thread_cap().max(1);
    let mut out: Vec<Result<U>> = Vec::with_capacity(items.len());
    let mut items = items.into_iter().peekable();
    while items.peek().is_some() {
        let wave: Vec<T> = items.by_ref().take(cap).collect();
        if wave.len() == 1 || cap == 1 {
            out.extend(wave.into_iter().map(&f));
            continue;
        }
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = wave.into_iter().map(|t| s.spawn(move || f(t))).collect();
            for h in handles {
                out.push(h.join().unwrap_or_else(|_| Err(Error::Contract("ensemble worker panicked".into()))));
            }
        });
    }
    out.into_iter().collect()
}

/// Trains `cfg.ensemble_size` members whose seeds derive from `cfg.seed` and
/// the member index. With `cfg.ubl.enabled`, every member first runs phase 1,
/// then one penalty vector is computed from the pooled validation-period
/// uncertainty matrix and each member is fine-tuned with it.
pub fn train_ensemble(data: &InverseData, bim: &BimConfig, cfg: &TrainConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.ensemble_size as u64).map(|k| derive_seed(cfg.seed, k)).collect();
    if !cfg.ubl.enabled {
        let runs = parallel_map(seeds, |s| {
            let mut t = InverseTrainer::new(data, bim.clone(), cfg, s)?;
            t.run_phase(1, cfg.epochs, None)?;
            Ok(t.finish())
        })?;
        let (members, manifests) = runs.into_iter().unzip();
        return Ok(Ensemble {
            members,
            manifests,
            penalty: None,
            phase1_members: None,
        });
    }
    if bim.mode != Mode::Bayesian {
        return Err(Error::arg("uncertainty-weighted training requires bayesian mode"));
    }
    let (p1, p2) = cfg.ubl_phases();
    let trainers = parallel_map(seeds, |s| {
        let mut t = InverseTrainer::new(data, bim.clone(), cfg, s)?;
        t.run_phase(1, p1, None)?;
        Ok(t)
    })?;
    let phase1: Vec<BimModel> = trainers.iter().map(|t| t.model.clone()).collect();
    let pooled = predict_pooled(&phase1, &data.val_all, cfg.mc_samples, derive_seed(cfg.seed, 1 << 32))?;
    let sigma = pooled_uncertainty_matrix(&pooled)?;
    let penalty = ubl_penalty_vector(&sigma, cfg.ubl.gamma)?;
    let runs = parallel_map(trainers, |mut t| {
        t.manifest.uncertainty_matrix = Some(sigma.clone());
        t.manifest.penalty = Some(penalty.clone());
        t.run_phase(2, p2, Some(&penalty))?;
        Ok(t.finish())
    })?;
    let (members, manifests) = runs.into_iter().unzip();
    Ok(Ensemble {
        members,
        manifests,
        penalty: Some(penalty),
        phase1_members: Some(phase1),
    })
}
