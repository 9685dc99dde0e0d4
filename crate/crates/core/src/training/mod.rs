//! Optimization of the inverse model: single runs, the two-phase
//! uncertainty-weighted schedule, ensembles, and the export of per-basin
//! static estimates for the forward model.

mod batch;
mod ensemble;
mod export;
mod inverse;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossComponents, LossWeights, PenaltyVector};
use crate::model::BimConfig;

pub use batch::{
    eligible_basins, epoch_batches, group_by_basin, make_contrastive_batch, pair_windows, BasinWindows,
    ContrastiveBatch,
};
pub use ensemble::{
    pool_predictions, pooled_uncertainty_matrix, predict_member, thread_cap, train_ensemble, Ensemble,
    MemberPrediction, PooledPrediction, THREADS_ENV,
};
pub use export::{
    read_estimates_csv, write_estimates_csv, export_static_estimates, EstimateRow, Provenance, StaticEstimates,
    WindowSpan,
};
pub use inverse::{train_inverse, train_inverse_ubl, InverseData, InverseTrainer};
pub use optim::{clip_grad_norm, Adam, EarlyStopping};

/// Weight on the KL term of each minibatch's free energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeight {
    /// `1 / number of batches per epoch`.
    #[default]
    PerBatch,
    /// `1 / number of sequences per epoch`: the per-batch weight rescaled for
    /// a data term that is a mean over the batch's sequences.
    PerSequence,
    Fixed(f64),
}

/// Schedule of the uncertainty-weighted fine-tuning phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UblConfig {
    pub enabled: bool,
    /// Blend between uniform (0) and eigenvector (1) weights.
    pub gamma: f64,
    /// Defaults to 70% of `epochs`.
    pub phase1_epochs: Option<usize>,
    /// Defaults to the remaining 30%.
    pub phase2_epochs: Option<usize>,
}

impl Default for UblConfig {
    fn default() -> Self {
        UblConfig {
            enabled: false,
            gamma: 0.5,
            phase1_epochs: None,
            phase2_epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Basins per batch; each contributes an anchor and a positive window.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    pub ensemble_size: usize,
    /// Posterior draws `S` for uncertainty estimates.
    pub mc_samples: usize,
    pub kl_weight: KlWeight,
    /// Epochs over which the KL weight ramps linearly up from near zero;
    /// 0 applies the full weight from the start.
    pub kl_warmup_epochs: usize,
    /// Window length in days.
    pub lookback: usize,
    /// Offset between window starts in days.
    pub stride: usize,
    pub loss: LossWeights,
    pub ubl: UblConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            patience: 10,
            seed: 0,
            ensemble_size: 5,
            mc_samples: 50,
            kl_weight: KlWeight::PerBatch,
            kl_warmup_epochs: 0,
            lookback: 365,
            stride: 182,
            loss: LossWeights::default(),
            ubl: UblConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.lookback == 0 || self.stride == 0 {
            return Err(Error::arg("batch_size, lookback and stride must be positive"));
        }
        if self.ensemble_size == 0 {
            return Err(Error::arg("ensemble_size must be at least 1"));
        }
        if self.mc_samples < 2 {
            return Err(Error::arg("mc_samples must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::arg("learning_rate and clip_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ubl.gamma) {
            return Err(Error::arg("ubl.gamma must lie in [0, 1]"));
        }
        if let KlWeight::Fixed(w) = self.kl_weight {
            if !(w >= 0.0) {
                return Err(Error::arg("fixed KL weight must be non-negative"));
            }
        }
        Ok(())
    }

    /// `(phase1, phase2)` epoch counts of the uncertainty-weighted schedule.
    pub fn ubl_phases(&self) -> (usize, usize) {
        let p1 = self
            .ubl
            .phase1_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 0.7).round() as usize);
        let p2 = self.ubl.phase2_epochs.unwrap_or(self.epochs.saturating_sub(p1));
        (p1, p2)
    }
}

/// Loss values of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    /// Batch-averaged training components.
    pub train: LossComponents,
    pub train_kl: f64,
    /// Batch-averaged optimized objective.
    pub train_objective: f64,
    pub val: LossComponents,
    /// The quantity early stopping watches.
    pub val_score: f64,
    pub grad_norm: f64,
}

/// Everything needed to reproduce and audit one inverse-model run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub train_config: TrainConfig,
    pub model_config: BimConfig,
    pub split_hash: String,
    /// Model seed followed by the batching seed.
    pub seeds: Vec<u64>,
    pub epochs: Vec<EpochRecord>,
    /// `(phase, epoch)` of the restored checkpoint per phase.
    pub best_epochs: Vec<(u8, usize)>,
    pub penalty: Option<PenaltyVector>,
    pub uncertainty_matrix: Option<Vec<Vec<f64>>>,
    pub status: String,
    pub wall_clock_secs: f64,
}

pub(crate) const MANIFEST_FORMAT: &str = "inverse-uq/run-manifest/1";
