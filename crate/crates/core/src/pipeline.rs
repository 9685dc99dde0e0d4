//! End-to-end orchestration over an output directory: train the inverse
//! ensemble, export validation-period estimates, train forward models, and
//! evaluate. Each stage reads its inputs from and writes its artifacts to the
//! run directory, so stages run separately or together give the same files.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! manifest.json          config, config hash, stages and their artifacts
//! events.jsonl           one JSON object per stage event and epoch
//! inverse/member_K.json  inverse checkpoints, inverse/manifest_K.json
//! estimates.csv          estimates.json (with provenance)
//! forward/model_K.json   forward/predictions.csv, forward/summary.json
//! report.json            report.csv
//! ```

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{load_dataset, split, Dataset, Partition, Partitions, Schema, SplitSpec, YearRange};
use crate::error::{Error, Result};
use crate::forward::{
    build_forward_samples, forward_ensemble_report, forward_series, predict_streamflow, train_forward,
    write_predictions_csv, ensemble_mean_predictions, ForwardConfig, StaticsSource,
};
use crate::metrics::{assemble_report, ForwardSummary, UncertaintyReport};
use crate::model::{BimConfig, BimModel};
use crate::training::{
    export_static_estimates, read_estimates_csv, train_ensemble, write_estimates_csv, InverseData, RunManifest,
    StaticEstimates, TrainConfig,
};
use crate::util::{derive_seed, sha256_hex, write_file};

pub const MANIFEST_FORMAT: &str = "inverse-uq/pipeline-manifest/1";

/// Location of the three CSV tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Holds `drivers.csv`, `response.csv` and `statics.csv`.
    pub dir: PathBuf,
    /// Column labels; read from `dir/schema.json` when absent.
    pub schema: Option<Schema>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            schema: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Number of training basins; the rest are test basins. Defaults to
    /// `train_fraction` of all basins.
    pub n_train_basins: Option<usize>,
    pub train_fraction: f64,
    pub seed: u64,
    pub train_years: YearRange,
    pub val_years: YearRange,
    pub test_years: YearRange,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_train_basins: None,
            train_fraction: 0.75,
            seed: 0,
            train_years: SplitSpec::DEFAULT_TRAIN_YEARS,
            val_years: SplitSpec::DEFAULT_VAL_YEARS,
            test_years: SplitSpec::DEFAULT_TEST_YEARS,
        }
    }
}

/// Statics fed to the forward model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticsChoice {
    Observed,
    /// `estimates.csv` of this run.
    Estimated,
    /// An estimates table from elsewhere.
    EstimatesFile(PathBuf),
    Zeros,
}

impl std::str::FromStr for StaticsChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "observed" => StaticsChoice::Observed,
            "estimated" => StaticsChoice::Estimated,
            "zeros" => StaticsChoice::Zeros,
            path => StaticsChoice::EstimatesFile(PathBuf::from(path)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: BimConfig,
    pub train: TrainConfig,
    pub forward: ForwardConfig,
    pub forward_statics: StaticsChoice,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataConfig::default(),
            split: SplitConfig::default(),
            model: BimConfig::default(),
            train: TrainConfig::default(),
            forward: ForwardConfig::default(),
            forward_statics: StaticsChoice::Estimated,
            output_dir: PathBuf::from("run"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.forward.validate()?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::arg("split.train_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON serialization, ignoring `output_dir` so
    /// the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(sha256_hex(serde_json::to_string(&c)?.as_bytes()))
    }

    /// A small synthetic setup that runs end to end in minutes: 20 basins,
    /// six years, 90-day windows and a three-member ensemble.
    pub fn demo(data_dir: &Path, output_dir: &Path) -> Self {
        let h = 16;
        PipelineConfig {
            data: DataConfig {
                dir: data_dir.to_path_buf(),
                schema: None,
            },
            split: SplitConfig {
                n_train_basins: Some(16),
                train_fraction: 0.8,
                seed: 0,
                train_years: YearRange::new(2000, 2004),
                val_years: YearRange::new(2004, 2005),
                test_years: YearRange::new(2005, 2006),
            },
            model: BimConfig {
                hidden_size: h,
                embed_size: h,
                regressor_hidden: h,
                decoder_hidden: h,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 12,
                batch_size: 8,
                learning_rate: 3e-3,
                ensemble_size: 3,
                mc_samples: 30,
                kl_weight: crate::training::KlWeight::PerSequence,
                kl_warmup_epochs: 4,
                lookback: 90,
                stride: 45,
                ..Default::default()
            },
            forward: ForwardConfig {
                hidden_size: h,
                epochs: 12,
                batch_size: 8,
                learning_rate: 3e-3,
                lookback: 120,
                stride: 30,
                warmup: 30,
                ensemble_size: 3,
                ..Default::default()
            },
            forward_statics: StaticsChoice::Estimated,
            output_dir: output_dir.to_path_buf(),
        }
    }
}

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainInverse,
    ExportStatics,
    TrainForward,
    Evaluate,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::TrainInverse => "train-inverse",
            Stage::ExportStatics => "export-statics",
            Stage::TrainForward => "train-forward",
            Stage::Evaluate => "evaluate",
        };
        f.write_str(s)
    }
}

/// An error tagged with the stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: String,
    pub artifacts: Vec<Artifact>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub format: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

/// Loaded data and split shared by every stage.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub dataset: Dataset,
    pub parts: Partitions,
    dir: PathBuf,
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn restrict(p: &Partition, ids: &[String]) -> Partition {
    let mut out = p.clone();
    out.data.records.retain(|r| ids.contains(&r.basin_id));
    out
}

impl Pipeline {
    /// Validates the config, loads the tables and splits them.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.data.dir.clone();
        if !dir.is_dir() {
            return Err(Error::io(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
            ));
        }
        let schema = match &config.data.schema {
            Some(s) => s.clone(),
            None => Schema::load(&dir.join("schema.json"))?,
        };
        let statics = dir.join("statics.csv");
        let dataset = load_dataset(
            &dir.join("drivers.csv"),
            &dir.join("response.csv"),
            statics.exists().then_some(statics.as_path()),
            &schema,
        )?;
        let ids = dataset.basin_ids();
        let n_train = config
            .split
            .n_train_basins
            .unwrap_or_else(|| ((ids.len() as f64) * config.split.train_fraction).round() as usize);
        let spec = SplitSpec::seeded(
            &ids,
            n_train,
            config.split.seed,
            config.split.train_years,
            config.split.val_years,
            config.split.test_years,
        )?;
        let parts = split(&dataset, &spec)?;
        let config_hash = config.hash()?;
        let out = config.output_dir.clone();
        let p = Pipeline {
            config,
            config_hash,
            dataset,
            parts,
            dir: out,
        };
        if p.read_manifest().is_err() {
            p.write_manifest(&p.fresh_manifest())?;
        }
        Ok(p)
    }

    pub fn output_dir(&self) -> &Path {
        &self.dir
    }

    fn fresh_manifest(&self) -> PipelineManifest {
        PipelineManifest {
            format: MANIFEST_FORMAT.into(),
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            stages: Vec::new(),
        }
    }

    fn read_manifest(&self) -> Result<PipelineManifest> {
        let path = self.dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: PipelineManifest = serde_json::from_str(&text)?;
        if m.config_hash != self.config_hash {
            return Err(Error::Integrity(format!(
                "{} was written by a different config ({})",
                path.display(),
                m.config_hash
            )));
        }
        Ok(m)
    }

    fn write_manifest(&self, m: &PipelineManifest) -> Result<()> {
        write_file(&self.dir.join("manifest.json"), serde_json::to_string_pretty(m)?.as_bytes())
    }

    fn record_stage(&self, stage: Stage, result: &Result<Vec<PathBuf>>) -> Result<()> {
        let mut m = self.read_manifest().unwrap_or_else(|_| self.fresh_manifest());
        m.stages.retain(|s| s.stage != stage);
        let rec = match result {
            Ok(paths) => StageRecord {
                stage,
                status: "ok".into(),
                artifacts: paths
                    .iter()
                    .map(|p| {
                        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                        Ok(Artifact {
                            path: rel(&self.dir, p),
                            sha256: sha256_hex(&bytes),
                        })
                    })
                    .collect::<Result<_>>()?,
                error: None,
            },
            Err(e) => StageRecord {
                stage,
                status: "failed".into(),
                artifacts: Vec::new(),
                error: Some(e.to_string()),
            },
        };
        m.stages.push(rec);
        m.stages.sort_by_key(|s| s.stage as u8);
        self.write_manifest(&m)
    }

    /// Appends one JSON object to `events.jsonl`.
    pub fn event(&self, value: serde_json::Value) -> Result<()> {
        let path = self.dir.join("events.jsonl");
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = serde_json::to_string(&value)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    fn run_stage<T>(&self, stage: Stage, f: impl FnOnce() -> Result<(T, Vec<PathBuf>)>) -> Result<T, StageError> {
        let wrap = |error| StageError { stage, error };
        self.event(json!({"event": "stage_start", "stage": stage, "config_hash": self.config_hash}))
            .map_err(wrap)?;
        let (value, result) = match f() {
            Ok((v, paths)) => (Some(v), Ok(paths)),
            Err(e) => (None, Err(e)),
        };
        self.record_stage(stage, &result).map_err(wrap)?;
        match (value, result) {
            (Some(v), Ok(_)) => {
                self.event(json!({"event": "stage_end", "stage": stage, "status": "ok"})).map_err(wrap)?;
                Ok(v)
            }
            (_, Err(e)) => {
                let _ = self.event(json!({"event": "stage_end", "stage": stage, "status": "failed", "error": e.to_string()}));
                Err(wrap(e))
            }
            (None, Ok(_)) => unreachable!("value and result come from the same call"),
        }
    }

    fn inverse_data(&self) -> Result<InverseData> {
        InverseData::prepare(&self.parts, self.config.train.lookback, self.config.train.stride)
    }

    fn member_paths(&self) -> Vec<PathBuf> {
        (0..self.config.train.ensemble_size)
            .map(|k| self.dir.join("inverse").join(format!("member_{k}.json")))
            .collect()
    }

    /// Trains the inverse ensemble and writes checkpoints and manifests.
    pub fn train_inverse(&self) -> Result<Vec<RunManifest>, StageError> {
        self.run_stage(Stage::TrainInverse, || {
            let data = self.inverse_data()?;
            let ens = train_ensemble(&data, &self.config.model, &self.config.train)?;
            let mut paths = Vec::new();
            for (k, (m, man)) in ens.members.iter().zip(&ens.manifests).enumerate() {
                let p = self.dir.join("inverse").join(format!("member_{k}.json"));
                m.save(&p)?;
                paths.push(p);
                let mut man = man.clone();
                man.wall_clock_secs = 0.0;
                let p = self.dir.join("inverse").join(format!("manifest_{k}.json"));
                write_file(&p, serde_json::to_string_pretty(&man)?.as_bytes())?;
                paths.push(p);
                for e in &man.epochs {
                    self.event(json!({"event": "epoch", "stage": Stage::TrainInverse, "member": k, "record": e}))?;
                }
            }
            if let Some(pen) = &ens.penalty {
                let p = self.dir.join("inverse").join("penalty.json");
                write_file(&p, serde_json::to_string_pretty(pen)?.as_bytes())?;
                paths.push(p);
            }
            Ok((ens.manifests, paths))
        })
    }

    fn load_members(&self) -> Result<Vec<BimModel>> {
        self.member_paths().iter().map(|p| BimModel::load(p)).collect()
    }

    /// Pools every member over every validation-period window of every basin.
    pub fn export_statics(&self) -> Result<StaticEstimates, StageError> {
        self.run_stage(Stage::ExportStatics, || {
            let members = self.load_members()?;
            let data = self.inverse_data()?;
            let est = export_static_estimates(
                &members,
                &self.parts.val,
                &data.normalizer,
                self.config.train.lookback,
                self.config.train.stride,
                self.config.train.mc_samples,
                derive_seed(self.config.train.seed, 2),
            )?;
            let csv = self.dir.join("estimates.csv");
            write_estimates_csv(&csv, &est)?;
            let js = self.dir.join("estimates.json");
            write_file(&js, serde_json::to_string_pretty(&est)?.as_bytes())?;
            Ok((est, vec![csv, js]))
        })
    }

    fn read_estimates(&self) -> Result<StaticEstimates> {
        let p = self.dir.join("estimates.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Trains `forward.ensemble_size` forward models on the training basins
    /// and predicts the test basins over the test years.
    pub fn train_forward(&self, statics: &StaticsChoice) -> Result<ForwardSummary, StageError> {
        self.run_stage(Stage::TrainForward, || {
            let fc = &self.config.forward;
            let normalizer = crate::data::Normalizer::fit(&self.parts.train.data)?;
            let external;
            let owned;
            let source = match statics {
                StaticsChoice::Observed => StaticsSource::Observed,
                StaticsChoice::Zeros => StaticsSource::Zeros,
                StaticsChoice::Estimated => {
                    owned = self.read_estimates()?;
                    StaticsSource::Estimated(&owned)
                }
                StaticsChoice::EstimatesFile(p) => {
                    external = read_estimates_csv(p)?;
                    StaticsSource::Estimated(&external)
                }
            };
            let val_part = restrict(&self.parts.val, &self.parts.train_basins);
            let test_part = restrict(&self.parts.test, &self.parts.test_basins);
            let (train_s, _) = forward_series(&self.parts.train.data, source, &normalizer)?;
            let (val_s, _) = forward_series(&val_part.data, source, &normalizer)?;
            let (test_s, excluded) = forward_series(&test_part.data, source, &normalizer)?;
            if !excluded.is_empty() {
                log::warn!("{} test basin(s) lack statics and are not scored", excluded.len());
            }
            let train = build_forward_samples(&train_s, fc.lookback, fc.stride)?;
            let val = build_forward_samples(&val_s, fc.lookback, fc.stride)?;
            let nd = self.dataset.n_drivers();
            let ns = self.dataset.n_statics();
            let mut runs = Vec::new();
            let mut paths = Vec::new();
            for k in 0..fc.ensemble_size {
                let cfg = ForwardConfig {
                    seed: derive_seed(fc.seed, k as u64),
                    ..fc.clone()
                };
                let model = train_forward(&train, Some(&val), nd, ns, &cfg)?;
                for e in &model.history {
                    self.event(json!({"event": "epoch", "stage": Stage::TrainForward, "member": k, "record": e}))?;
                }
                let p = self.dir.join("forward").join(format!("model_{k}.json"));
                model.save(&p)?;
                paths.push(p);
                runs.push(predict_streamflow(&model, &test_s, &normalizer)?);
            }
            let summary = forward_ensemble_report(&runs)?;
            let mean_preds = ensemble_mean_predictions(&runs)?;
            let p = self.dir.join("forward").join("predictions.csv");
            write_predictions_csv(&p, &mean_preds, &runs)?;
            paths.push(p);
            let p = self.dir.join("forward").join("summary.json");
            write_file(&p, serde_json::to_string_pretty(&summary)?.as_bytes())?;
            paths.push(p);
            Ok((summary, paths))
        })
    }

    fn read_forward_summary(&self) -> Result<Option<ForwardSummary>> {
        let p = self.dir.join("forward").join("summary.json");
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Scores test-basin estimates against observed statics and folds in the
    /// forward summary when one exists.
    pub fn evaluate(&self) -> Result<UncertaintyReport, StageError> {
        self.run_stage(Stage::Evaluate, || {
            let mut est = self.read_estimates()?;
            est.rows.retain(|r| self.parts.is_test_basin(&r.basin_id));
            let observed: Vec<(String, Vec<f64>)> = est
                .rows
                .iter()
                .map(|r| {
                    let z = self
                        .dataset
                        .get(&r.basin_id)
                        .and_then(|b| b.statics.clone())
                        .ok_or_else(|| Error::Integrity(format!("basin {} has no observed statics", r.basin_id)))?;
                    Ok((r.basin_id.clone(), z))
                })
                .collect::<Result<_>>()?;
            let config = json!({
                "config_hash": self.config_hash,
                "mode": self.config.model.mode,
                "ubl": self.config.train.ubl.enabled,
                "ensemble_size": self.config.train.ensemble_size,
                "test_basins": self.parts.test_basins,
                "nse_aggregation": ["median", "mean"],
            });
            let report = assemble_report(&est, &observed, self.read_forward_summary()?, config)?;
            let js = self.dir.join("report.json");
            let csv = self.dir.join("report.csv");
            report.write(&js, &csv)?;
            Ok((report, vec![js, csv]))
        })
    }

    /// All stages in order with the configured forward statics.
    pub fn run_all(&self) -> Result<UncertaintyReport, StageError> {
        self.train_inverse()?;
        self.export_statics()?;
        self.train_forward(&self.config.forward_statics)?;
        self.evaluate()
    }
}
