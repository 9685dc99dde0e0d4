//! Streamflow forward model: a unidirectional LSTM with a linear head over
//! per-step `[x_t; z]` inputs, where `z` comes from observed characteristics,
//! exported estimates, or is ablated to zeros.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::data::{make_windows, BasinRecord, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::metrics::{mean, median, nse, ForwardMetrics, ForwardSummary};
use crate::model::{batch_steps, CandidateActivation, Linear, LstmParams};
use crate::training::{clip_grad_norm, Adam, EarlyStopping, StaticEstimates};
use crate::util::derive_seed;

/// Where the static block of the inputs comes from.
#[derive(Clone, Copy, Debug)]
pub enum StaticsSource<'a> {
    /// The basin's own characteristics from the dataset.
    Observed,
    /// Exported estimates, in physical units.
    Estimated(&'a StaticEstimates),
    /// All zeros in normalized units, i.e. every basin at the training mean.
    Zeros,
}

/// One lookback window of normalized forward-model inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSample {
    pub basin_id: String,
    pub start_index: usize,
    /// `L × (D_x + D_z)`; the static block repeats on every row.
    pub inputs: Tensor,
    /// Normalized response, length `L`.
    pub target: Vec<f64>,
}

/// A normalized basin series with the static vector the forward model sees.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSeries {
    pub record: BasinRecord,
    pub statics: Vec<f64>,
}

/// Normalizes `data` and attaches statics from `source`. Basins missing from
/// an estimate table are excluded with a warning and listed.
pub fn forward_series(data: &Dataset, source: StaticsSource, normalizer: &Normalizer) -> Result<(Vec<ForwardSeries>, Vec<String>)> {
    let norm = normalizer.apply(data)?;
    if let StaticsSource::Estimated(est) = source {
        if est.static_names != data.static_names {
            return Err(Error::Schema(format!(
                "estimate columns {:?} do not match dataset statics {:?}",
                est.static_names, data.static_names
            )));
        }
    }
    let d = data.n_statics();
    let mut out = Vec::new();
    let mut excluded = Vec::new();
    for r in norm.records {
        let statics = match source {
            StaticsSource::Observed => match &r.statics {
                Some(z) => z.clone(),
                None => {
                    log::warn!("basin {} has no observed statics; excluded", r.basin_id);
                    excluded.push(r.basin_id.clone());
                    continue;
                }
            },
            StaticsSource::Estimated(est) => match est.get(&r.basin_id) {
                Some(row) => normalizer.normalize_statics(&row.mean),
                None => {
                    log::warn!("basin {} missing from the estimate table; excluded", r.basin_id);
                    excluded.push(r.basin_id.clone());
                    continue;
                }
            },
            StaticsSource::Zeros => vec![0.0; d],
        };
        out.push(ForwardSeries { record: r, statics });
    }
    Ok((out, excluded))
}

/// Windows of `[x_t; z]` with the response as target, built with the same
/// slicing and missing-value rules as the inverse model's windows.
pub fn build_forward_samples(series: &[ForwardSeries], lookback: usize, stride: usize) -> Result<Vec<ForwardSample>> {
    let mut out = Vec::new();
    for s in series {
        let dx = s.record.drivers.first().map_or(0, Vec::len);
        let width = dx + s.statics.len();
        for w in make_windows(&s.record, lookback, stride)? {
            let mut data = Vec::with_capacity(lookback * width);
            let mut target = Vec::with_capacity(lookback);
            for t in 0..w.length {
                let row = w.inputs.row_slice(t);
                data.extend_from_slice(&row[..dx]);
                data.extend_from_slice(&s.statics);
                target.push(row[dx]);
            }
            out.push(ForwardSample {
                basin_id: w.basin_id,
                start_index: w.start_index,
                inputs: Tensor::from_vec(w.length, width, data)?,
                target,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardConfig {
    pub hidden_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    /// Window length of training samples, in days.
    pub lookback: usize,
    pub stride: usize,
    /// Leading steps of each window excluded from the loss; at prediction
    /// time, the history run before each reported chunk.
    pub warmup: usize,
    pub ensemble_size: usize,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            hidden_size: 64,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            patience: 10,
            seed: 0,
            lookback: 730,
            stride: 182,
            warmup: 365,
            ensemble_size: 5,
        }
    }
}

impl ForwardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.batch_size == 0 || self.stride == 0 || self.ensemble_size == 0 {
            return Err(Error::arg("forward hidden_size, batch_size, stride and ensemble_size must be positive"));
        }
        if self.warmup >= self.lookback {
            return Err(Error::arg(format!(
                "forward warmup ({}) must be shorter than lookback ({})",
                self.warmup, self.lookback
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::arg("forward learning_rate and clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardModel {
    pub config: ForwardConfig,
    pub n_drivers: usize,
    pub n_statics: usize,
    params: ParamStore,
    lstm: LstmParams,
    head: Linear,
    pub history: Vec<ForwardEpoch>,
    pub best_epoch: Option<usize>,
}

const CHECKPOINT_FORMAT: &str = "inverse-uq/forward-model/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: ForwardModel,
}

impl ForwardModel {
    pub fn new(config: ForwardConfig, n_drivers: usize, n_statics: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let lstm = LstmParams::init(
            &mut params,
            "forward.lstm",
            n_drivers + n_statics,
            config.hidden_size,
            CandidateActivation::Tanh,
            &mut rng,
        );
        let head = Linear::init(&mut params, "forward.head", config.hidden_size, 1, &mut rng);
        Ok(ForwardModel {
            config,
            n_drivers,
            n_statics,
            params,
            lstm,
            head,
            history: Vec::new(),
            best_epoch: None,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn input_width(&self) -> usize {
        self.n_drivers + self.n_statics
    }

    /// Mean squared error over steps `warmup..L` of a batch, with its gradient
    /// accumulated into the parameter store when `train` is set.
    fn batch_loss(&mut self, batch: &[&ForwardSample], train: bool) -> Result<f64> {
        let wins: Vec<&Tensor> = batch.iter().map(|s| &s.inputs).collect();
        let steps = batch_steps(&wins)?;
        let warm = self.config.warmup;
        let mut g = Graph::new();
        let xs: Vec<_> = steps.into_iter().map(|s| g.constant(s)).collect();
        let lstm = self.lstm.bind(&mut g, &self.params)?;
        let (hs, _) = lstm.run(&mut g, &xs, false)?;
        let (w, b) = self.head.bind(&mut g, &self.params);
        let mut terms = Vec::with_capacity(hs.len() - warm);
        for (t, &h) in hs.iter().enumerate().skip(warm) {
            let y = g.matmul(h, w)?;
            let y = g.add_row(y, b)?;
            let target = Tensor::from_vec(batch.len(), 1, batch.iter().map(|s| s.target[t]).collect())?;
            let target = g.constant(target);
            let e = g.sub(y, target)?;
            terms.push(g.square(e));
        }
        let all = g.concat_rows(&terms)?;
        let loss = g.mean(all);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        if train {
            let grads = g.backward(loss)?;
            self.params.accumulate(&grads);
        }
        Ok(value)
    }

    fn mean_loss(&mut self, samples: &[ForwardSample]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in samples.chunks(self.config.batch_size.max(64)) {
            let refs: Vec<&ForwardSample> = chunk.iter().collect();
            total += self.batch_loss(&refs, false)? * chunk.len() as f64;
            n += chunk.len();
        }
        Ok(total / n as f64)
    }

    /// Predicts every day of a normalized series in chunks of
    /// `lookback − warmup` reported days, each preceded by up to `warmup`
    /// days of history. Missing drivers enter as zeros (the training mean).
    pub fn predict_normalized(&self, series: &ForwardSeries) -> Result<Vec<f64>> {
        let r = &series.record;
        let t_len = r.len();
        if series.statics.len() != self.n_statics || r.drivers.first().is_some_and(|d| d.len() != self.n_drivers) {
            return Err(Error::Schema(format!("basin {}: input width does not match the model", r.basin_id)));
        }
        let report = self.config.lookback - self.config.warmup;
        let mut out = vec![f64::NAN; t_len];
        let mut s = 0;
        while s < t_len {
            let start = s.saturating_sub(self.config.warmup);
            let end = (s + report).min(t_len);
            let len = end - start;
            let mut data = Vec::with_capacity(len * self.input_width());
            for t in start..end {
                data.extend(r.drivers[t].iter().map(|&x| if x.is_finite() { x } else { 0.0 }));
                data.extend_from_slice(&series.statics);
            }
            let x = Tensor::from_vec(len, self.input_width(), data)?;
            let ys = self.run_sequence(&x)?;
            out[s..end].copy_from_slice(&ys[s - start..]);
            s = end;
        }
        Ok(out)
    }

    fn run_sequence(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let steps = batch_steps(&[x])?;
        let xs: Vec<_> = steps.into_iter().map(|s| g.constant(s)).collect();
        let lstm = self.lstm.bind(&mut g, &self.params)?;
        let (hs, _) = lstm.run(&mut g, &xs, false)?;
        hs.iter()
            .map(|&h| Ok(self.head.apply(&self.params, g.value(h))?.item()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: self.clone(),
        };
        crate::util::write_file(path, serde_json::to_string(&ck)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format {:?}", ck.format)));
        }
        let mut m = ck.model;
        m.params.zero_grad();
        Ok(m)
    }
}

/// Trains with Adam on the windowed MSE, early-stopping on `val` when given
/// and restoring the best parameters.
pub fn train_forward(
    train: &[ForwardSample],
    val: Option<&[ForwardSample]>,
    n_drivers: usize,
    n_statics: usize,
    config: &ForwardConfig,
) -> Result<ForwardModel> {
    if train.is_empty() {
        return Err(Error::arg("no forward training samples"));
    }
    let mut model = ForwardModel::new(config.clone(), n_drivers, n_statics, config.seed)?;
    if let Some(s) = train.iter().find(|s| s.inputs.cols() != model.input_width() || s.inputs.rows() != config.lookback) {
        return Err(Error::Schema(format!(
            "sample of basin {} is {:?}, expected {} × {}",
            s.basin_id,
            s.inputs.shape(),
            config.lookback,
            model.input_width()
        )));
    }
    let val = val.filter(|v| !v.is_empty());
    let mut adam = Adam::new(config.learning_rate, 0.9, 0.999, 1e-8);
    let mut stop = EarlyStopping::new(config.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.params.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ForwardSample> = chunk.iter().map(|&i| &train[i]).collect();
            model.params.zero_grad();
            let loss = model.batch_loss(&batch, true)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    component: "forward mse".into(),
                    epoch,
                });
            }
            clip_grad_norm(&mut model.params, config.clip_norm);
            adam.step(&mut model.params);
            total += loss * chunk.len() as f64;
        }
        let train_mse = total / train.len() as f64;
        let val_mse = match val {
            Some(v) => Some(model.mean_loss(v)?),
            None => None,
        };
        model.history.push(ForwardEpoch { epoch, train_mse, val_mse });
        let score = val_mse.unwrap_or(train_mse);
        if stop.observe(epoch, score) {
            best = model.params.clone();
            model.best_epoch = Some(epoch);
        }
        if stop.should_stop() {
            break;
        }
    }
    model.params = best;
    model.params.zero_grad();
    Ok(model)
}

/// Observed and predicted response of one basin, in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinPrediction {
    pub basin_id: String,
    pub dates: Vec<NaiveDate>,
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Predicts each series and de-normalizes the response.
pub fn predict_streamflow(model: &ForwardModel, series: &[ForwardSeries], normalizer: &Normalizer) -> Result<Vec<BasinPrediction>> {
    series
        .iter()
        .map(|s| {
            let y = model.predict_normalized(s)?;
            Ok(BasinPrediction {
                basin_id: s.record.basin_id.clone(),
                dates: s.record.dates.clone(),
                observed: s.record.response.iter().map(|&v| normalizer.response.invert(v)).collect(),
                predicted: y.into_iter().map(|v| normalizer.response.invert(v)).collect(),
            })
        })
        .collect()
}

/// NSE of one basin over days with a finite observation.
pub fn basin_nse(p: &BasinPrediction) -> Result<Option<f64>> {
    let (obs, pred): (Vec<f64>, Vec<f64>) = p
        .observed
        .iter()
        .zip(&p.predicted)
        .filter(|(o, y)| o.is_finite() && y.is_finite())
        .map(|(&o, &y)| (o, y))
        .unzip();
    if obs.len() < 2 {
        return Ok(None);
    }
    nse(&obs, &pred)
}

/// Per-basin NSE with mean and median aggregation over defined basins.
pub fn forward_metrics(preds: &[BasinPrediction]) -> Result<ForwardMetrics> {
    let mut per_basin = Vec::with_capacity(preds.len());
    let mut undefined = Vec::new();
    for p in preds {
        let v = basin_nse(p)?;
        if v.is_none() {
            undefined.push(p.basin_id.clone());
        }
        per_basin.push((p.basin_id.clone(), v));
    }
    let defined: Vec<f64> = per_basin.iter().filter_map(|(_, v)| *v).collect();
    Ok(ForwardMetrics {
        median_nse: median(&defined),
        mean_nse: mean(&defined),
        per_basin,
        undefined,
    })
}

/// Per-day mean prediction across runs that cover the same basins and dates.
pub fn ensemble_mean_predictions(runs: &[Vec<BasinPrediction>]) -> Result<Vec<BasinPrediction>> {
    let first = runs.first().ok_or_else(|| Error::arg("no forward runs"))?;
    let ids: BTreeSet<&str> = first.iter().map(|p| p.basin_id.as_str()).collect();
    for (k, run) in runs.iter().enumerate().skip(1) {
        let other: BTreeSet<&str> = run.iter().map(|p| p.basin_id.as_str()).collect();
        if other != ids || run.len() != first.len() {
            let diff: Vec<&str> = ids.symmetric_difference(&other).copied().collect();
            return Err(Error::Integrity(format!("run {k} covers different basins: {diff:?}")));
        }
    }
    let mut averaged = Vec::with_capacity(first.len());
    for p in first {
        let members: Vec<&BasinPrediction> = runs
            .iter()
            .map(|r| r.iter().find(|q| q.basin_id == p.basin_id).expect("coverage checked"))
            .collect();
        if members.iter().any(|m| m.dates != p.dates) {
            return Err(Error::Integrity(format!("runs disagree on the dates of basin {}", p.basin_id)));
        }
        let n = members.len() as f64;
        let predicted = (0..p.dates.len())
            .map(|t| members.iter().map(|m| m.predicted[t]).sum::<f64>() / n)
            .collect();
        averaged.push(BasinPrediction {
            basin_id: p.basin_id.clone(),
            dates: p.dates.clone(),
            observed: p.observed.clone(),
            predicted,
        });
    }
    Ok(averaged)
}

/// Average NSE is the mean over runs of each run's basin-aggregated NSE;
/// ensemble NSE scores the per-day mean prediction across runs.
pub fn forward_ensemble_report(runs: &[Vec<BasinPrediction>]) -> Result<ForwardSummary> {
    let averaged = ensemble_mean_predictions(runs)?;
    let per_run = runs.iter().map(|r| forward_metrics(r)).collect::<Result<Vec<_>>>()?;
    let medians: Vec<f64> = per_run.iter().filter_map(|m| m.median_nse).collect();
    let means: Vec<f64> = per_run.iter().filter_map(|m| m.mean_nse).collect();
    Ok(ForwardSummary {
        average_nse_median: mean(&medians),
        average_nse_mean: mean(&means),
        ensemble: forward_metrics(&averaged)?,
        runs: per_run,
    })
}

/// `basin_id,date,y_obs,y_pred` plus `y_pred_run{k}` columns when several
/// runs are given; `y_pred` is their mean.
pub fn write_predictions_csv(path: &Path, summary_preds: &[BasinPrediction], runs: &[Vec<BasinPrediction>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["basin_id".to_string(), "date".into(), "y_obs".into(), "y_pred".into()];
    if runs.len() > 1 {
        header.extend((0..runs.len()).map(|k| format!("y_pred_run{k}")));
    }
    w.write_record(&header)?;
    let fmt = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
    for p in summary_preds {
        let members: Vec<&BasinPrediction> = runs
            .iter()
            .filter_map(|r| r.iter().find(|q| q.basin_id == p.basin_id))
            .collect();
        for t in 0..p.dates.len() {
            let mut rec = vec![
                p.basin_id.clone(),
                p.dates[t].to_string(),
                fmt(p.observed[t]),
                fmt(p.predicted[t]),
            ];
            if runs.len() > 1 {
                rec.extend(members.iter().map(|m| fmt(m.predicted[t])));
            }
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::util::write_file(path, &bytes)
}
