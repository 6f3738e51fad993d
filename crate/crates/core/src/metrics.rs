//! Accuracy reports, feature discriminability, and PCA embeddings.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{CausalModel, Inference, PredictMode};
use crate::nn::ParamSet;

/// Samples per forward pass during inference.
pub const EVAL_BATCH: usize = 256;

fn round3<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1000.0).round() / 1000.0)
}

fn round3_map<S: Serializer>(m: &IndexMap<String, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &((v * 1000.0).round() / 1000.0))?;
    }
    map.end()
}

/// Accuracy summary. Percentages are kept exact in memory and written to
/// three decimals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(serialize_with = "round3")]
    pub accuracy: f64,
    #[serde(serialize_with = "round3_map")]
    pub per_class: IndexMap<String, f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub n_eval: usize,
    pub predict_mode: PredictMode,
}

impl EvalReport {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        class_names: &[String],
        predict_mode: PredictMode,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
        }
        if predictions.len() != labels.len() {
            return Err(Error::shape("evaluate", &[predictions.len()], &[labels.len()]));
        }
        let k = class_names.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= k || y >= k {
                return Err(Error::InvalidArgument(format!("class index out of range for {k} classes")));
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = class_names
            .iter()
            .enumerate()
            .filter_map(|(i, name)| {
                let total: usize = confusion[i].iter().sum();
                (total > 0).then(|| (name.clone(), 100.0 * confusion[i][i] as f64 / total as f64))
            })
            .collect();
        Ok(Self {
            accuracy: 100.0 * correct as f64 / labels.len() as f64,
            per_class,
            confusion,
            n_eval: labels.len(),
            predict_mode,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Confusion matrix with class names heading both rows and columns.
    pub fn write_confusion_csv(&self, class_names: &[String], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\pred".to_owned()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in class_names.iter().zip(&self.confusion) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_geometry(model: &CausalModel, ds: &Dataset) -> Result<()> {
    let [c, h, w] = model.input_shape();
    match ds.image_shape() {
        None => Err(Error::InvalidArgument("cannot evaluate an empty split".into())),
        Some(g) if g != (h, w, c) => Err(Error::InvalidConfig(format!(
            "model expects {h}x{w}x{c} images, data has {}x{}x{}",
            g.0, g.1, g.2
        ))),
        _ if ds.num_classes() != model.num_classes() => Err(Error::InvalidConfig(format!(
            "model has {} classes, data has {}",
            model.num_classes(),
            ds.num_classes()
        ))),
        _ => Ok(()),
    }
}

/// Runs the model over `ds` in fixed-size chunks.
pub fn infer_dataset(model: &CausalModel, params: &ParamSet<f32>, ds: &Dataset) -> Result<Vec<Inference<f32>>> {
    check_geometry(model, ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    idx.chunks(EVAL_BATCH)
        .map(|c| model.infer(params, ds.batch_tensor(c)?))
        .collect()
}

pub fn predict_dataset(
    model: &CausalModel,
    params: &ParamSet<f32>,
    ds: &Dataset,
    mode: PredictMode,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for inf in infer_dataset(model, params, ds)? {
        out.extend(inf.predict(mode)?);
    }
    Ok(out)
}

/// Stratification-mean features per sample: `F` for baseline, `F ⊙ A` for
/// interventional.
pub fn pooled_features_dataset(
    model: &CausalModel,
    params: &ParamSet<f32>,
    ds: &Dataset,
    mode: PredictMode,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ds.len());
    for inf in infer_dataset(model, params, ds)? {
        out.extend(inf.pooled_features(mode)?);
    }
    Ok(out)
}

pub fn evaluate(model: &CausalModel, params: &ParamSet<f32>, ds: &Dataset, mode: PredictMode) -> Result<EvalReport> {
    let pred = predict_dataset(model, params, ds, mode)?;
    EvalReport::from_predictions(&pred, &ds.labels(), &ds.class_names, mode)
}

fn null_if_infinite<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscriminabilityReport {
    /// Mean pairwise Euclidean distance between class centroids.
    pub inter: f64,
    /// Mean Euclidean distance of samples to their class centroid.
    pub intra: f64,
    /// `inter / intra`; `+inf` (written as `null`) when `intra == 0`.
    #[serde(serialize_with = "null_if_infinite")]
    pub ratio: f64,
    pub feature_space: PredictMode,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Inter/intra class separation of `features`. Classes absent from `labels`
/// are ignored; every present class needs at least two samples.
pub fn discriminability(features: &[Vec<f64>], labels: &[usize], feature_space: PredictMode) -> Result<DiscriminabilityReport> {
    if features.len() != labels.len() {
        return Err(Error::shape("discriminability", &[features.len()], &[labels.len()]));
    }
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument("features must be non-empty vectors of equal length".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        sums[y].iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    if let Some(c) = counts.iter().position(|&c| c == 1) {
        return Err(Error::InvalidArgument(format!("class {c} has a single sample")));
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            inter += dist(&centroids[a], &centroids[b]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    let intra = features
        .iter()
        .zip(labels)
        .map(|(f, &y)| dist(f, &centroids[y]))
        .sum::<f64>()
        / features.len() as f64;
    let ratio = if intra > 0.0 { inter / intra } else { f64::INFINITY };
    Ok(DiscriminabilityReport {
        inter,
        intra,
        ratio,
        feature_space,
    })
}

const POWER_MAX_ITERS: usize = 100_000;
const POWER_TOL: f64 = 1e-14;

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Flips `v` so its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenvector of symmetric `m` (`d×d`, row-major) orthogonal to
/// `exclude`.
fn power_iteration(m: &[f64], d: usize, exclude: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let project = |v: &mut Vec<f64>| {
        for u in exclude {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
    };
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    project(&mut v);
    if normalize(&mut v) == 0.0 {
        v = vec![0.0; d];
        v[exclude.len() % d] = 1.0;
        project(&mut v);
        normalize(&mut v);
    }
    let mut eig = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut next = mat_vec(m, &v);
        project(&mut next);
        eig = normalize(&mut next);
        if eig == 0.0 {
            break;
        }
        let aligned: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
        if aligned < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let delta = dist(&next, &v);
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    fix_sign(&mut v);
    (v, eig)
}

/// Mean-centred projection onto the top `components` principal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit axes, strongest first.
    pub axes: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(features: &[Vec<f64>], components: usize) -> Result<Self> {
        let n = features.len();
        let d = features.first().map_or(0, Vec::len);
        if n < 3 {
            return Err(Error::InvalidArgument(format!("PCA needs at least 3 samples, got {n}")));
        }
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::InvalidArgument("features must be non-empty vectors of equal length".into()));
        }
        if components == 0 || components > d {
            return Err(Error::InvalidArgument(format!("cannot take {components} components of {d}-d data")));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut cov = vec![0.0; d * d];
        for f in features {
            let c: Vec<f64> = f.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let scale = mean.iter().map(|m| m.abs()).fold(1.0, f64::max);
        if trace <= 1e-24 * scale * scale {
            return Err(Error::InvalidArgument("features have rank 0 (all samples identical)".into()));
        }
        let mut axes = Vec::with_capacity(components);
        let mut variances = Vec::with_capacity(components);
        for _ in 0..components {
            let (v, eig) = power_iteration(&cov, d, &axes);
            axes.push(v);
            variances.push(eig);
        }
        Ok(Self { mean, axes, variances })
    }

    pub fn project(&self, f: &[f64]) -> Vec<f64> {
        self.axes
            .iter()
            .map(|a| a.iter().zip(f).zip(&self.mean).map(|((a, v), m)| a * (v - m)).sum())
            .collect()
    }
}

#[derive(Serialize)]
struct EmbeddingRow {
    x: f64,
    y: f64,
    label: usize,
}

/// Writes the top-2 PCA projection of `features` as CSV `x,y,label`.
pub fn export_embeddings(features: &[Vec<f64>], labels: &[usize], path: &Path) -> Result<Pca> {
    if features.len() != labels.len() {
        return Err(Error::shape("export_embeddings", &[features.len()], &[labels.len()]));
    }
    let pca = Pca::fit(features, 2)?;
    let mut w = csv::Writer::from_path(path)?;
    for (f, &label) in features.iter().zip(labels) {
        let p = pca.project(f);
        w.serialize(EmbeddingRow { x: p[0], y: p[1], label })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(pca)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| i.to_string()).collect()
    }

    #[test]
    fn hand_counted_report() {
        let r = EvalReport::from_predictions(&[0, 1, 1, 0], &[0, 1, 0, 0], &names(2), PredictMode::Baseline).unwrap();
        assert_eq!(r.accuracy, 75.0);
        assert_eq!(r.confusion, vec![vec![2, 1], vec![0, 1]]);
        assert!(r.to_json().unwrap().contains("\"accuracy\": 75.0"));
    }

    #[test]
    fn oracle_predictions_score_100() {
        let y = [0, 1, 2, 2, 1];
        let r = EvalReport::from_predictions(&y, &y, &names(3), PredictMode::Interventional).unwrap();
        assert_eq!(r.accuracy, 100.0);
        for (i, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), row[i]);
        }
        assert!(EvalReport::from_predictions(&[], &[], &names(3), PredictMode::Baseline).is_err());
    }

    #[test]
    fn three_decimal_rendering() {
        let mut r = EvalReport::from_predictions(&[0, 1], &[0, 1], &names(2), PredictMode::Baseline).unwrap();
        for v in [92.783, 98.557] {
            r.accuracy = v + 1e-7;
            assert!(r.to_json().unwrap().contains(&format!("\"accuracy\": {v}")));
        }
    }

    #[test]
    fn coincident_classes_give_infinite_ratio() {
        let f = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]];
        let r = discriminability(&f, &[0, 0, 1, 1], PredictMode::Baseline).unwrap();
        assert_eq!((r.inter, r.intra), (10.0, 0.0));
        assert!(r.ratio.is_infinite());
        assert!(serde_json::to_string(&r).unwrap().contains("\"ratio\":null"));
        assert!(discriminability(&f[..3], &[0, 0, 1], PredictMode::Baseline).is_err());
    }

    #[test]
    fn pca_rejects_rank_zero() {
        let f = vec![vec![1.0, 2.0]; 5];
        assert!(Pca::fit(&f, 2).is_err());
        assert!(Pca::fit(&f[..2], 1).is_err());
    }
}
