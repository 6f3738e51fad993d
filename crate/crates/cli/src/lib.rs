//! Command implementations behind the `debias` binary.
//!
//! Every command resolves a [`RunConfig`] (JSON file, then flags), echoes it
//! to `config_echo.json` in the output directory, and writes its artifacts
//! next to it. Feeding the echo back through `--config` reproduces the run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cir_core::data::{self, Split};
use cir_core::metrics::pooled_features_dataset;
use cir_core::model::Pooling;
use cir_core::train::CsvLog;
use cir_core::{
    discriminability, evaluate, export_embeddings, BackboneConfig, CausalModel, Checkpoint, Dataset, EvalReport,
    ModelConfig, PredictMode, SyntheticSpec, TrainConfig, TrainOutcome,
};

pub const CONFIG_ECHO: &str = "config_echo.json";
pub const CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const DISCRIMINABILITY_JSON: &str = "discriminability.json";
pub const CROP_CSV: &str = "crop_accuracy.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

pub const DEFAULT_CROPS: [usize; 4] = [8, 16, 24, 32];
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.001, 0.01, 0.1, 0.5, 1.0];

/// Marks a failure caused by bad invocation, configuration or missing
/// inputs. The binary maps it to exit code 2; everything else exits 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<cir_core::Error>(),
                Some(cir_core::Error::InvalidConfig(_) | cir_core::Error::Manifest { .. })
            )
    });
    if is_usage {
        2
    } else {
        1
    }
}

/// Fully resolved settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialization, splitting and shuffling.
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; `None` lets the pool pick.
    pub threads: Option<usize>,
    /// Manifest directory. `None` generates `synthetic` in memory.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    /// Feature backbone; also the activation backbone unless `sam_backbone` is set.
    pub backbone: BackboneConfig,
    pub sam_backbone: Option<BackboneConfig>,
    pub pooling: Pooling,
    pub checkpoint: Option<PathBuf>,
    /// Prediction rule for evaluation and model selection; `None` defers to
    /// the checkpoint or to the training default.
    pub mode: Option<PredictMode>,
    pub split: Split,
    pub export_features: bool,
    pub crops: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Concurrent trainings in `sweep`.
    pub parallel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            threads: None,
            data: None,
            synthetic: SyntheticSpec::default(),
            train: TrainConfig::default(),
            backbone: BackboneConfig::default(),
            sam_backbone: None,
            pooling: Pooling::Mean,
            checkpoint: None,
            mode: None,
            split: Split::Test,
            export_features: false,
            crops: DEFAULT_CROPS.to_vec(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            parallel: 1,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Propagates the run seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        if self.mode.is_some() && self.train.predict_mode.is_none() {
            self.train.predict_mode = self.mode;
        }
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.synthetic.validate().map_err(|e| usage(e.to_string()))?;
        self.backbone.stratifications().map_err(|e| usage(e.to_string()))?;
        if self.parallel == 0 {
            return Err(usage("parallel must be >= 1"));
        }
        if self.threads == Some(0) {
            return Err(usage("threads must be >= 1"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(usage(format!("lambda values must be >= 0, got {l}")));
        }
        if self.crops.contains(&0) {
            return Err(usage("crop sizes must be >= 1"));
        }
        Ok(self)
    }

    /// Model for a training run with `lambda`. The activation branch is
    /// omitted when it can influence neither training nor prediction.
    pub fn model_config(&self, num_classes: usize, train: &TrainConfig) -> ModelConfig {
        let cfg = ModelConfig {
            fem: self.backbone.clone(),
            sam: Some(self.sam_backbone.clone().unwrap_or_else(|| self.backbone.clone())),
            num_classes,
            pooling: self.pooling,
        };
        if train.lambda == 0.0 && train.resolved_predict_mode() == PredictMode::Baseline {
            cfg.without_sam()
        } else {
            cfg
        }
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)? + "\n";
        write_file(&dir.join(CONFIG_ECHO), json.as_bytes())
    }

    /// The configured manifest, or the synthetic dataset.
    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            Some(dir) => data::load_manifest(dir).map_err(|e| match e {
                cir_core::Error::Io { .. } => usage(format!("cannot load data from {}: {e}", dir.display())),
                other => other.into(),
            }),
            None => Ok(data::generate_synthetic(&self.synthetic, self.seed)?),
        }
    }

    fn load_checkpoint(&self) -> Result<Checkpoint> {
        let path = self.checkpoint.as_ref().ok_or_else(|| usage("a checkpoint is required (--checkpoint)"))?;
        if !path.is_file() {
            return Err(usage(format!("checkpoint not found: {}", path.display())));
        }
        Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating output directory {}", cfg.out.display()))?;
    cfg.write_echo(&cfg.out)?;
    Ok(&cfg.out)
}

fn nonempty_split(ds: &Dataset, split: Split) -> Result<Dataset> {
    let part = ds.split(split);
    if part.is_empty() {
        return Err(usage(format!("dataset has no {split} samples")));
    }
    Ok(part)
}

fn masked(ds: &Dataset, crop: usize) -> Result<Dataset> {
    Ok(ds.map_images(|im| data::center_crop_mask(im, crop))?)
}

/// One training run plus its test-split report.
pub struct RunResult {
    pub model: CausalModel,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains on the train split of `ds` and evaluates the selected parameters
/// on its test split.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    log: Option<&Path>,
) -> Result<RunResult> {
    let train_set = nonempty_split(ds, Split::Train)?;
    let test_set = nonempty_split(ds, Split::Test)?;
    let model = CausalModel::new(cfg.model_config(ds.num_classes(), train_cfg)).map_err(|e| usage(e.to_string()))?;
    let outcome = match log {
        Some(path) => {
            let mut csv = CsvLog::create(path)?;
            cir_core::train(&model, train_cfg, &train_set, &mut csv)?
        }
        None => cir_core::train(&model, train_cfg, &train_set, &mut ())?,
    };
    let report = evaluate(&model, &outcome.params, &test_set, outcome.predict_mode)?;
    Ok(RunResult { model, outcome, report })
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ds = data::generate_synthetic(&cfg.synthetic, cfg.seed)?;
    data::export_dataset(&ds, out)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ds = cfg.load_data()?;
    let run = train_and_evaluate(cfg, &cfg.train, &ds, Some(&out.join(TRAIN_LOG)))?;
    let ckpt = Checkpoint {
        model: run.model.config().clone(),
        class_names: ds.class_names.clone(),
        predict_mode: run.outcome.predict_mode,
        params: run.outcome.params,
    };
    ckpt.save(&out.join(CHECKPOINT))?;
    run.report.write_json(&out.join(EVAL_JSON))?;
    run.report.write_confusion_csv(&ds.class_names, &out.join(CONFUSION_CSV))?;
    Ok(())
}

fn write_features(model: &CausalModel, ckpt: &Checkpoint, ds: &Dataset, mode: PredictMode, out: &Path) -> Result<()> {
    let features = pooled_features_dataset(model, &ckpt.params, ds, mode)?;
    let labels = ds.labels();
    export_embeddings(&features, &labels, &out.join(EMBEDDINGS_CSV))?;
    let report = discriminability(&features, &labels, mode)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_file(&out.join(DISCRIMINABILITY_JSON), json.as_bytes())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ckpt = cfg.load_checkpoint()?;
    let model = ckpt.build_model()?;
    let ds = nonempty_split(&cfg.load_data()?, cfg.split)?;
    let mode = cfg.mode.unwrap_or(ckpt.predict_mode);
    let report = evaluate(&model, &ckpt.params, &ds, mode)?;
    report.write_json(&out.join(EVAL_JSON))?;
    report.write_confusion_csv(&ckpt.class_names, &out.join(CONFUSION_CSV))?;
    if cfg.export_features {
        write_features(&model, &ckpt, &ds, mode, out)?;
    }
    Ok(())
}

pub fn cmd_export_features(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let ckpt = cfg.load_checkpoint()?;
    let model = ckpt.build_model()?;
    let ds = nonempty_split(&cfg.load_data()?, cfg.split)?;
    write_features(&model, &ckpt, &ds, cfg.mode.unwrap_or(ckpt.predict_mode), out)
}

fn write_rows(path: &Path, header: [&str; 2], rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for (key, acc) in rows {
        w.write_record([key.clone(), acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Test accuracy per crop size: retrained per crop from the config, or a
/// checkpoint evaluated under each test-time crop.
pub fn crop_accuracies(cfg: &RunConfig) -> Result<Vec<(usize, f64)>> {
    let ds = cfg.load_data()?;
    let (h, w, _) = ds.image_shape().ok_or_else(|| usage("dataset is empty"))?;
    if let Some(&c) = cfg.crops.iter().find(|&&c| c > h.min(w)) {
        return Err(usage(format!("crop {c} exceeds the {h}x{w} image size")));
    }
    if cfg.checkpoint.is_some() {
        let ckpt = cfg.load_checkpoint()?;
        let model = ckpt.build_model()?;
        let test = nonempty_split(&ds, Split::Test)?;
        let mode = cfg.mode.unwrap_or(ckpt.predict_mode);
        return cfg
            .crops
            .iter()
            .map(|&c| Ok((c, evaluate(&model, &ckpt.params, &masked(&test, c)?, mode)?.accuracy)))
            .collect();
    }
    cfg.crops
        .iter()
        .map(|&c| Ok((c, train_and_evaluate(cfg, &cfg.train, &masked(&ds, c)?, None)?.report.accuracy)))
        .collect()
}

pub fn cmd_crop_experiment(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let rows: Vec<_> = crop_accuracies(cfg)?.into_iter().map(|(c, a)| (c.to_string(), a)).collect();
    write_rows(&out.join(CROP_CSV), ["crop", "accuracy"], &rows)
}

/// Test accuracy per `λ`, ascending in `λ`, every run sharing the seed.
pub fn sweep_accuracies(cfg: &RunConfig) -> Result<Vec<(f64, f64)>> {
    let ds = cfg.load_data()?;
    let mut lambdas = cfg.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let run = |&lambda: &f64| -> Result<(f64, f64)> {
        let train = TrainConfig { lambda, ..cfg.train.clone() };
        Ok((lambda, train_and_evaluate(cfg, &train, &ds, None)?.report.accuracy))
    };
    if cfg.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallel).build()?;
        pool.install(|| lambdas.par_iter().map(run).collect())
    } else {
        lambdas.iter().map(run).collect()
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let rows: Vec<_> = sweep_accuracies(cfg)?.into_iter().map(|(l, a)| (l.to_string(), a)).collect();
    write_rows(&out.join(SWEEP_CSV), ["lambda", "accuracy"], &rows)
}
