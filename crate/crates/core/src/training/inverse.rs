use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::batch::{eligible_basins, epoch_batches, group_by_basin, BasinWindows};
use super::ensemble::{pool_predictions, pooled_uncertainty_matrix, predict_member};
use super::optim::{clip_grad_norm, Adam, EarlyStopping};
use super::{EpochRecord, KlWeight, RunManifest, TrainConfig, MANIFEST_FORMAT};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{make_windows, Dataset, Normalizer, Partitions, WindowSample, YearRange};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, pseudo_inverse_loss, reconstruction_loss, total_loss_graph, ubl_penalty_vector,
    LossComponents, LossWeights, PenaltyVector,
};
use crate::model::{batch_steps, BimConfig, BimModel, Mode, ModelNoise};
use crate::util::{derive_seed, sha256_hex};

/// Normalized, windowed partitions ready for inverse-model training.
#[derive(Clone, Debug)]
pub struct InverseData {
    pub normalizer: Normalizer,
    pub driver_names: Vec<String>,
    pub static_names: Vec<String>,
    /// Training basins, training years, with static targets.
    pub train: Vec<BasinWindows>,
    /// Training basins, validation years, with static targets (model
    /// selection only).
    pub val: Vec<BasinWindows>,
    /// Every basin in the validation years, without targets.
    pub val_all: Vec<BasinWindows>,
    pub val_years: YearRange,
    pub split_hash: String,
    pub lookback: usize,
    pub stride: usize,
}

fn windows_of(ds: &Dataset, lookback: usize, stride: usize, keep_targets: bool) -> Result<Vec<BasinWindows>> {
    let mut all = Vec::new();
    for r in &ds.records {
        let mut ws = make_windows(r, lookback, stride)?;
        if !keep_targets {
            ws.iter_mut().for_each(|w| w.target_statics = None);
        }
        all.extend(ws);
    }
    Ok(group_by_basin(all))
}

#[derive(Serialize)]
struct SplitIdentity<'a> {
    train_years: YearRange,
    val_years: YearRange,
    test_years: YearRange,
    train_basins: &'a [String],
    test_basins: &'a [String],
}

impl InverseData {
    pub fn prepare(parts: &Partitions, lookback: usize, stride: usize) -> Result<Self> {
        let normalizer = Normalizer::fit(&parts.train.data)?;
        let train = windows_of(&normalizer.apply(&parts.train.data)?, lookback, stride, true)?;
        if train.is_empty() {
            return Err(Error::arg(format!(
                "training partition yields no complete {lookback}-day windows"
            )));
        }
        let val_norm = normalizer.apply(&parts.val.data)?;
        let labeled: Vec<_> = val_norm
            .records
            .iter()
            .filter(|r| parts.train_basins.contains(&r.basin_id))
            .cloned()
            .collect();
        let val = windows_of(&val_norm.with_records(labeled), lookback, stride, true)?;
        let val_all = windows_of(&val_norm, lookback, stride, false)?;
        let ident = SplitIdentity {
            train_years: parts.train.years,
            val_years: parts.val.years,
            test_years: parts.test.years,
            train_basins: &parts.train_basins,
            test_basins: &parts.test_basins,
        };
        Ok(InverseData {
            normalizer,
            driver_names: parts.train.data.driver_names.clone(),
            static_names: parts.train.data.static_names.clone(),
            train,
            val,
            val_all,
            val_years: parts.val.years,
            split_hash: sha256_hex(serde_json::to_string(&ident)?.as_bytes()),
            lookback,
            stride,
        })
    }

    /// Encoder input width `D_x + 1`.
    pub fn input_size(&self) -> usize {
        self.driver_names.len() + 1
    }

    pub fn n_statics(&self) -> usize {
        self.static_names.len()
    }
}

/// Loss values of one batch (or an average over batches).
#[derive(Clone, Copy, Debug, Default)]
struct BatchEval {
    c: LossComponents,
    kl: f64,
    objective: f64,
}

/// Builds the training objective for `seqs` (anchors then positives).
fn objective(
    g: &mut Graph,
    model: &BimModel,
    seqs: &[&WindowSample],
    noise: &ModelNoise,
    w: &LossWeights,
    penalty: Option<&[f64]>,
    kl_weight: Option<f64>,
) -> Result<(Var, BatchEval)> {
    let inputs: Vec<&Tensor> = seqs.iter().map(|s| &s.inputs).collect();
    let steps = batch_steps(&inputs)?;
    let fv = model.forward(g, &steps, noise, w.lambda1 > 0.0)?;
    let rec = if w.lambda1 > 0.0 {
        Some(reconstruction_loss(g, &fv.recon, &fv.inputs)?)
    } else {
        None
    };
    let cont = if w.lambda2 > 0.0 {
        Some(contrastive_loss(g, fv.h, w.tau)?)
    } else {
        None
    };
    let targets: Vec<Option<Vec<f64>>> = seqs.iter().map(|s| s.target_statics.clone()).collect();
    let inv = pseudo_inverse_loss(g, fv.z_hat, &targets, penalty)?;
    let data = total_loss_graph(g, rec, cont, inv, w)?;
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let mut eval = BatchEval {
        c: LossComponents {
            rec: value(g, rec),
            cont: value(g, cont),
            inv: value(g, inv),
        },
        kl: 0.0,
        objective: g.value(data).item(),
    };
    let out = match (kl_weight, model.kl_graph(g)?) {
        (Some(kw), Some(kl)) => {
            eval.kl = g.value(kl).item();
            let scaled = g.scale(kl, kw);
            let f = g.add(data, scaled)?;
            eval.objective = g.value(f).item();
            f
        }
        _ => data,
    };
    Ok((out, eval))
}

/// Multiplier of the KL weight in the `done`-th epoch of a run.
pub(crate) fn kl_ramp(done: usize, warmup: usize) -> f64 {
    if done >= warmup {
        1.0
    } else {
        (done + 1) as f64 / (warmup + 1) as f64
    }
}

fn check_finite(e: &BatchEval, epoch: usize) -> Result<()> {
    for (name, v) in [
        ("reconstruction loss", e.c.rec),
        ("contrastive loss", e.c.cont),
        ("pseudo-inverse loss", e.c.inv),
        ("KL", e.kl),
        ("objective", e.objective),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                component: name.into(),
                epoch,
            });
        }
    }
    Ok(())
}

/// Stateful trainer for one inverse model. Phases can be run one after the
/// other; the manifest stays available when a phase fails.
pub struct InverseTrainer<'a> {
    data: &'a InverseData,
    cfg: TrainConfig,
    pub model: BimModel,
    pub manifest: RunManifest,
    opt: Adam,
    rng: ChaCha8Rng,
    eligible: Vec<usize>,
    val_seed: u64,
    started: Instant,
}

impl<'a> InverseTrainer<'a> {
    pub fn new(data: &'a InverseData, mut bim: BimConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        bim.input_size = data.input_size();
        bim.n_statics = data.n_statics();
        let model = BimModel::new(bim.clone(), seed)?;
        let batch_seed = derive_seed(seed, 1);
        let eligible = eligible_basins(&data.train);
        if eligible.is_empty() {
            return Err(Error::arg("no training basin has at least 2 windows"));
        }
        Ok(InverseTrainer {
            data,
            cfg: cfg.clone(),
            model,
            manifest: RunManifest {
                format: MANIFEST_FORMAT.into(),
                train_config: cfg.clone(),
                model_config: bim,
                split_hash: data.split_hash.clone(),
                seeds: vec![seed, batch_seed],
                epochs: Vec::new(),
                best_epochs: Vec::new(),
                penalty: None,
                uncertainty_matrix: None,
                status: "running".into(),
                wall_clock_secs: 0.0,
            },
            opt: Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(batch_seed),
            eligible,
            val_seed: derive_seed(seed, 2),
            started: Instant::now(),
        })
    }

    fn train_epoch(&mut self, epoch: usize, penalty: Option<&[f64]>) -> Result<(BatchEval, f64)> {
        let batches = epoch_batches(&self.data.train, &self.eligible, self.cfg.batch_size, &mut self.rng);
        let kl_weight = match self.cfg.kl_weight {
            KlWeight::PerBatch => 1.0 / batches.len() as f64,
            KlWeight::PerSequence => 1.0 / batches.iter().map(|b| 2 * b.len()).sum::<usize>() as f64,
            KlWeight::Fixed(w) => w,
        } * kl_ramp(self.manifest.epochs.len(), self.cfg.kl_warmup_epochs);
        let bayes = self.model.mode() == Mode::Bayesian;
        let mut acc = BatchEval::default();
        let mut norm_acc = 0.0;
        for pair in &batches {
            let noise = if bayes {
                self.model.sample_noise(&mut self.rng)
            } else {
                ModelNoise::default()
            };
            let mut g = Graph::new();
            let (out, eval) = objective(
                &mut g,
                &self.model,
                &pair.sequences(),
                &noise,
                &self.cfg.loss,
                penalty,
                bayes.then_some(kl_weight),
            )?;
            check_finite(&eval, epoch)?;
            let grads = g.backward(out)?;
            drop(g);
            self.model.params.zero_grad();
            self.model.params.accumulate(&grads);
            let norm = clip_grad_norm(&mut self.model.params, self.cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    component: "gradient".into(),
                    epoch,
                });
            }
            self.opt.step(&mut self.model.params);
            if !self.model.params.all_finite() {
                return Err(Error::Diverged {
                    component: "parameters".into(),
                    epoch,
                });
            }
            acc.c.rec += eval.c.rec;
            acc.c.cont += eval.c.cont;
            acc.c.inv += eval.c.inv;
            acc.kl += eval.kl;
            acc.objective += eval.objective;
            norm_acc += norm;
        }
        let n = batches.len() as f64;
        Ok((
            BatchEval {
                c: LossComponents {
                    rec: acc.c.rec / n,
                    cont: acc.c.cont / n,
                    inv: acc.c.inv / n,
                },
                kl: acc.kl / n,
                objective: acc.objective / n,
            },
            norm_acc / n,
        ))
    }

    /// Validation losses at the posterior means with fixed pairings. The
    /// inverse component uses `penalty` when given.
    fn validate(&self, penalty: Option<&[f64]>) -> Result<Option<LossComponents>> {
        let eligible: Vec<usize> = (0..self.data.val.len())
            .filter(|&i| self.data.val[i].windows.len() >= 2)
            .collect();
        if eligible.is_empty() {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.val_seed);
        let noise = self.model.mean_noise();
        let mut acc = LossComponents::default();
        let mut n = 0.0;
        for pair in epoch_batches(&self.data.val, &eligible, self.cfg.batch_size, &mut rng) {
            let mut g = Graph::new();
            let (_, e) = objective(&mut g, &self.model, &pair.sequences(), &noise, &self.cfg.loss, penalty, None)?;
            acc.rec += e.c.rec;
            acc.cont += e.c.cont;
            acc.inv += e.c.inv;
            n += 1.0;
        }
        Ok(Some(LossComponents {
            rec: acc.rec / n,
            cont: acc.cont / n,
            inv: acc.inv / n,
        }))
    }

    fn score(&self, phase: u8, val: &LossComponents) -> f64 {
        let w = &self.cfg.loss;
        if phase == 2 {
            val.inv
        } else {
            w.lambda1 * val.rec + w.lambda2 * val.cont + w.lambda3 * val.inv
        }
    }

    /// Runs up to `epochs` epochs with early stopping and restores the best
    /// parameters. Phase 2 replaces the inverse loss by its `penalty`-weighted
    /// form and stops on the weighted validation inverse loss, with the
    /// phase's starting point as the first candidate.
    pub fn run_phase(&mut self, phase: u8, epochs: usize, penalty: Option<&PenaltyVector>) -> Result<()> {
        let result = self.run_phase_inner(phase, epochs, penalty);
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        match &result {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => self.manifest.status = format!("failed: {e}"),
        }
        result
    }

    fn run_phase_inner(&mut self, phase: u8, epochs: usize, penalty: Option<&PenaltyVector>) -> Result<()> {
        let w = penalty.map(|p| p.w.as_slice());
        if let Some(w) = w {
            if w.len() != self.data.n_statics() {
                return Err(Error::arg("penalty vector length differs from the number of statics"));
            }
        }
        let mut stopper = EarlyStopping::new(self.cfg.patience);
        let mut best = self.model.params.clone();
        if phase == 2 {
            if let Some(v) = self.validate(w)? {
                stopper.observe(0, self.score(phase, &v));
                self.manifest.epochs.push(EpochRecord {
                    phase,
                    epoch: 0,
                    train: LossComponents::default(),
                    train_kl: 0.0,
                    train_objective: f64::NAN,
                    val: v,
                    val_score: self.score(phase, &v),
                    grad_norm: 0.0,
                });
            }
        }
        for epoch in 1..=epochs {
            let (tr, norm) = self.train_epoch(epoch, w)?;
            let val = self.validate(w)?;
            let score = match &val {
                Some(v) => self.score(phase, v),
                None => tr.objective,
            };
            if stopper.observe(epoch, score) {
                best = self.model.params.clone();
            }
            let rec = EpochRecord {
                phase,
                epoch,
                train: tr.c,
                train_kl: tr.kl,
                train_objective: tr.objective,
                val: val.unwrap_or_default(),
                val_score: score,
                grad_norm: norm,
            };
            log::debug!("{}", serde_json::to_string(&rec).unwrap_or_default());
            self.manifest.epochs.push(rec);
            if stopper.should_stop() {
                break;
            }
        }
        if let Some((e, _)) = stopper.best() {
            self.model.params = best;
            self.model.params.zero_grad();
            self.manifest.best_epochs.push((phase, e));
        }
        Ok(())
    }

    pub fn finish(mut self) -> (BimModel, RunManifest) {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        (self.model, self.manifest)
    }
}

/// Trains one model for `cfg.epochs` epochs with early stopping.
pub fn train_inverse(data: &InverseData, bim: &BimConfig, cfg: &TrainConfig) -> Result<(BimModel, RunManifest)> {
    let mut t = InverseTrainer::new(data, bim.clone(), cfg, cfg.seed)?;
    t.run_phase(1, cfg.epochs, None)?;
    Ok(t.finish())
}

/// Phase 1 of standard training, then fine-tuning with the pseudo-inverse
/// loss re-weighted by the penalty vector of the validation-period
/// uncertainty matrix.
pub fn train_inverse_ubl(
    data: &InverseData,
    bim: &BimConfig,
    cfg: &TrainConfig,
) -> Result<(BimModel, PenaltyVector, RunManifest)> {
    if bim.mode != Mode::Bayesian {
        return Err(Error::arg("uncertainty-weighted training requires bayesian mode"));
    }
    let (p1, p2) = cfg.ubl_phases();
    let mut t = InverseTrainer::new(data, bim.clone(), cfg, cfg.seed)?;
    t.run_phase(1, p1, None)?;
    let preds = predict_member(&t.model, &data.val_all, cfg.mc_samples, derive_seed(cfg.seed, 3))?;
    let sigma = pooled_uncertainty_matrix(&pool_predictions(&[preds])?)?;
    let penalty = ubl_penalty_vector(&sigma, cfg.ubl.gamma)?;
    t.manifest.uncertainty_matrix = Some(sigma);
    t.manifest.penalty = Some(penalty.clone());
    t.run_phase(2, p2, Some(&penalty))?;
    let (m, man) = t.finish();
    Ok((m, penalty, man))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_ramp_rises_linearly_then_holds() {
        assert_eq!(kl_ramp(0, 0), 1.0);
        assert_eq!(kl_ramp(5, 0), 1.0);
        let r: Vec<f64> = (0..5).map(|e| kl_ramp(e, 3)).collect();
        assert_eq!(r, [0.25, 0.5, 0.75, 1.0, 1.0]);
    }
}
