//! Mini-batch training with validation-based checkpoint selection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics;
use crate::model::{predict, CausalModel, PredictMode};
use crate::nn::{ParamGroup, ParamSet};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain `p -= lr · g`.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub adam: AdamConfig,
    pub optimizer: Optimizer,
    /// Rule used for validation accuracy. `None` picks interventional when
    /// `lambda > 0` and baseline otherwise.
    pub predict_mode: Option<PredictMode>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 0.01,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            val_fraction: 0.1,
            adam: AdamConfig::default(),
            optimizer: Optimizer::Adam,
            predict_mode: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps.is_nan() || a.eps <= 0.0 {
            return bad(format!("invalid adam settings {a:?}"));
        }
        Ok(())
    }

    pub fn resolved_predict_mode(&self) -> PredictMode {
        self.predict_mode.unwrap_or(if self.lambda > 0.0 {
            PredictMode::Interventional
        } else {
            PredictMode::Baseline
        })
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::shape("adam_step", &[param.len()], &[grad.len(), state.m.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let c1 = f(1.0 - cfg.beta1.powi(t));
    let c2 = f(1.0 - cfg.beta2.powi(t));
    let (lr, eps, one) = (f(lr), f(cfg.eps), T::one());
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Stratified split of `dataset` into `(train, val)`: each class contributes
/// `round(count · val_fraction)` samples to validation, clamped so both sides
/// keep at least one.
pub fn split_train_val(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (k, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class `{}` has {} sample(s); at least 2 are needed to split",
                dataset.class_names[k],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::stream(seed, "val_split", &[k as u64]));
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// One row of the training log. `val_acc` is set on the last batch of each
/// epoch. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub batch: usize,
    pub l_ce: f64,
    pub l_cr_sum: f64,
    pub l_total: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// Hooks invoked while training runs.
pub trait TrainObserver {
    fn on_row(&mut self, _row: &TrainLogRow) -> Result<()> {
        Ok(())
    }

    /// Called after the last update of `epoch` (1-based), before validation.
    fn on_epoch(&mut self, _epoch: usize, _params: &ParamSet<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Streams log rows to a CSV file as they are produced.
pub struct CsvLog {
    writer: csv::Writer<std::fs::File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: csv::Writer::from_path(path)?,
        })
    }
}

impl TrainObserver for CsvLog {
    fn on_row(&mut self, row: &TrainLogRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer
            .flush()
            .map_err(|e| Error::io("train log", e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the end of the best validation epoch.
    pub params: ParamSet<f32>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub predict_mode: PredictMode,
    pub log: Vec<TrainLogRow>,
    /// Optimizer steps taken per parameter tensor.
    pub steps: u64,
}

/// Splits `dataset` with [`split_train_val`] and trains on the result.
pub fn train(
    model: &CausalModel,
    cfg: &TrainConfig,
    dataset: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (tr, val) = split_train_val(dataset, cfg.val_fraction, cfg.seed)?;
    train_with_validation(model, cfg, &tr, &val, observer)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hit = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hit as f64 / labels.len().max(1) as f64
}

/// Trains from the seeded initialization on `train_set`, selecting the epoch
/// with the highest accuracy on `val_set` (earliest on ties).
pub fn train_with_validation(
    model: &CausalModel,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("train and validation sets must be non-empty".into()));
    }
    if train_set.num_classes() != model.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            train_set.num_classes()
        )));
    }
    if let Some(k) = train_set.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "training set has no samples of class `{}`",
            train_set.class_names[k]
        )));
    }
    let [c, h, w] = model.input_shape();
    if train_set.image_shape() != Some((h, w, c)) {
        return Err(Error::InvalidConfig(format!(
            "model expects {c}x{h}x{w} inputs, dataset images are {:?} (HxWxC)",
            train_set.image_shape()
        )));
    }
    let mode = cfg.resolved_predict_mode();
    if mode == PredictMode::Interventional && !model.has_sam() {
        return Err(Error::InvalidConfig(
            "interventional validation needs the activation branch".into(),
        ));
    }

    let mut params: ParamSet<f32> = model.init_params(cfg.seed)?;
    let mut states: BTreeMap<String, AdamState<f32>> = params
        .iter()
        .map(|(n, t)| (n.to_owned(), AdamState::new(t.numel())))
        .collect();
    let mut steps = 0u64;
    let labels = train_set.labels();
    let val_labels = val_set.labels();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[epoch as u64]));
        let n_batches = order.len().div_ceil(cfg.batch_size);
        let (mut seen, mut hits) = (0usize, 0usize);
        let mut pending = None;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::<f32>::new();
            let vars = params.register(&mut tape, true);
            let x = tape.constant(train_set.batch_tensor(chunk)?);
            let out = model.forward(&mut tape, &vars, x)?;
            let loss = total_loss(&mut tape, &out, &y, cfg.lambda)?;
            let lb = &loss.breakdown;
            if !(lb.l_total.is_finite() && tape.value(loss.total).is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi + 1,
                });
            }
            let pred = predict(
                tape.value(out.baseline_logits),
                out.strat_logits.map(|v| tape.value(v)),
                mode,
            )?;
            seen += y.len();
            hits += pred.iter().zip(&y).filter(|(p, l)| p == l).count();

            let mut grads = tape.backward(loss.total)?;
            for group in [ParamGroup::Cls, ParamGroup::Sam, ParamGroup::Sem] {
                let names: Vec<String> = params.group(group).map(|(n, _)| n.to_owned()).collect();
                for name in names {
                    let g: Tensor<f32> = grads
                        .take(vars[&name])
                        .expect("tracked leaf has a gradient");
                    let p = params.get_mut(&name).expect("registered parameter");
                    match cfg.optimizer {
                        Optimizer::Adam => {
                            let st = states.get_mut(&name).expect("state per parameter");
                            adam_step(p.data_mut(), g.data(), st, cfg.lr, &cfg.adam)?;
                        }
                        Optimizer::Sgd => {
                            let lr = cfg.lr as f32;
                            p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
                        }
                    }
                }
            }
            steps += 1;

            let row = TrainLogRow {
                epoch,
                batch: bi + 1,
                l_ce: lb.l_ce,
                l_cr_sum: lb.l_cr_sum(),
                l_total: lb.l_total,
                train_acc: 100.0 * hits as f64 / seen as f64,
                val_acc: None,
            };
            if bi + 1 == n_batches {
                pending = Some(row);
            } else {
                observer.on_row(&row)?;
                log.push(row);
            }
        }
        observer.on_epoch(epoch, &params)?;

        let val_pred = metrics::predict_dataset(model, &params, val_set, mode)?;
        let val_acc = accuracy(&val_pred, &val_labels);
        let mut row = pending.expect("at least one batch per epoch");
        row.val_acc = Some(val_acc);
        observer.on_row(&row)?;
        log.push(row);
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, params.clone()));
        }
    }

    let (best_epoch, best_val_acc, params) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_val_acc,
        predict_mode: mode,
        log,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn zero_grad_keeps_param_and_counts_step() {
        let mut p = vec![1.5f64, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.01, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = vec![0.0f64, 0.0, 0.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.2, 1e-3], &mut st, 0.01, &AdamConfig::default()).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
        assert!((p[2] + 0.01).abs() < 1e-7);
        assert!(adam_step(&mut p, &[1.0], &mut st, 0.01, &AdamConfig::default()).is_err());
    }

    fn small_data(n_train: usize) -> Dataset {
        let spec = SyntheticSpec {
            num_classes: 2,
            image_size: 8,
            n_train,
            n_test: 1,
            fg_size: 3,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, 5).unwrap().split(crate::data::Split::Train)
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let ds = small_data(50);
        let (tr, val) = split_train_val(&ds, 0.1, 3).unwrap();
        assert_eq!((tr.len(), val.len()), (90, 10));
        assert_eq!(val.class_counts(), vec![5, 5]);
        let (tr2, val2) = split_train_val(&ds, 0.1, 3).unwrap();
        assert_eq!((tr, val), (tr2, val2));
        let one = ds.subset(&[0, 1, 2, 60]);
        let err = split_train_val(&one, 0.1, 3).unwrap_err().to_string();
        assert!(err.contains("class `1`"), "{err}");
    }

    #[test]
    fn single_full_batch_epoch_is_one_step() {
        let ds = small_data(10);
        let model = CausalModel::new(crate::model::ModelConfig::new(
            crate::nn::BackboneConfig::vgg(1, 8, &[4, 8]),
            2,
        ))
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1000,
            ..TrainConfig::default()
        };
        let out = train(&model, &cfg, &ds, &mut ()).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.log.len(), 1);
        let r = &out.log[0];
        assert!((r.l_total - (r.l_ce + 0.1 * r.l_cr_sum)).abs() < 1e-6);
        assert!(r.val_acc.is_some());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.resolved_predict_mode(), PredictMode::Interventional);
        for bad in [
            TrainConfig { val_fraction: 1.0, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { lambda: -0.1, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
