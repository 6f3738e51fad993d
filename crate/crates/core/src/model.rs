//! Dual-branch model: a feature-extraction backbone producing stratified
//! semantics `F`, a semantic-activation backbone producing the gate `A`, and
//! one affine classifier shared by the pooled path and every stratification.
//!
//! Stratification `t` is spatial position `t` of the final feature map,
//! flattened row-major, so `n = s²` and each `F_t` has `n_c` channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lookup, param_seed, he_init, Backbone, BackboneConfig, ParamSet, ParamVars};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Reduction of `F` over stratifications feeding the pooled path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

/// Which score the prediction rule maximizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// `argmax_k Σ_t log softmax_k(strat_logits[t])`.
    #[default]
    Interventional,
    /// `argmax_k baseline_logits`.
    Baseline,
}

impl std::fmt::Display for PredictMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Interventional => "interventional",
            Self::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for PredictMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interventional" => Ok(Self::Interventional),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown predict mode `{other}` (expected interventional or baseline)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fem: BackboneConfig,
    /// `None` builds the plain baseline classifier with no activation branch.
    pub sam: Option<BackboneConfig>,
    pub num_classes: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, num_classes: usize) -> Self {
        Self {
            fem: backbone.clone(),
            sam: Some(backbone),
            num_classes,
            pooling: Pooling::Mean,
        }
    }

    /// Same model without the activation branch.
    pub fn without_sam(mut self) -> Self {
        self.sam = None;
        self
    }
}

/// Tape handles produced by [`CausalModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B, K]` pooled-path logits.
    pub baseline_logits: Var,
    /// `[B, n, K]` per-stratification logits of the gated features.
    pub strat_logits: Option<Var>,
    /// `[B, n, n_c]` stratified semantics `F`.
    pub features: Var,
    /// `[B, n, n_c]` gate `A`, strictly inside (0, 1).
    pub activations: Option<Var>,
}

/// Plain-tensor snapshot of a forward pass.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub baseline_logits: Tensor<T>,
    pub strat_logits: Option<Tensor<T>>,
    pub features: Tensor<T>,
    pub activations: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalModel {
    cfg: ModelConfig,
    fem: Backbone,
    sam: Option<Backbone>,
    n: usize,
    n_c: usize,
}

pub const CLS_WEIGHT: &str = "cls.weight";
pub const CLS_BIAS: &str = "cls.bias";

impl CausalModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                cfg.num_classes
            )));
        }
        let fem = Backbone::new(cfg.fem.clone(), "fem")?;
        let s = fem.final_spatial();
        let n_c = fem.final_channels();
        let sam = match &cfg.sam {
            Some(sc) => {
                let sam = Backbone::new(sc.clone(), "sam")?;
                if sam.final_spatial() != s || sam.final_channels() != n_c {
                    return Err(Error::InvalidConfig(format!(
                        "activation branch emits {}x{}x{} but feature branch emits {s}x{s}x{n_c}",
                        sam.final_spatial(),
                        sam.final_spatial(),
                        sam.final_channels()
                    )));
                }
                if sc.input_size != cfg.fem.input_size || sc.input_channels != cfg.fem.input_channels {
                    return Err(Error::InvalidConfig(
                        "both branches must read the same input geometry".into(),
                    ));
                }
                Some(sam)
            }
            None => None,
        };
        Ok(Self {
            cfg,
            fem,
            sam,
            n: s * s,
            n_c,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Number of stratifications.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Channels per stratification.
    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn has_sam(&self) -> bool {
        self.sam.is_some()
    }

    /// `[C, H, W]` of one input image.
    pub fn input_shape(&self) -> [usize; 3] {
        [
            self.cfg.fem.input_channels,
            self.cfg.fem.input_size,
            self.cfg.fem.input_size,
        ]
    }

    /// Fresh parameters. Each tensor's draw depends only on `seed` and its
    /// name, so models with and without the activation branch share their
    /// feature-extractor and classifier initialization.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamSet<T>> {
        let mut ps = self.fem.init_params(seed)?;
        if let Some(sam) = &self.sam {
            ps.extend(sam.init_params(seed)?)?;
        }
        let k = self.cfg.num_classes;
        ps.insert(
            CLS_WEIGHT,
            he_init(&[self.n_c, k], self.n_c, param_seed(seed, CLS_WEIGHT))?,
        )?;
        ps.insert(CLS_BIAS, Tensor::zeros(&[k]))?;
        Ok(ps)
    }

    /// Checks that `params` holds exactly this model's tensors with the
    /// right shapes.
    pub fn check_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        let want: ParamSet<T> = self.init_params(0)?;
        if want.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "model expects {} parameter tensors, got {}",
                want.len(),
                params.len()
            )));
        }
        for (name, t) in want.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::shape("parameter", got.shape(), t.shape()));
            }
        }
        Ok(())
    }

    /// `[B, n_c, s, s] -> [B, n, n_c]`, stratification `t = r·s + c`.
    fn stratify<T: Real>(&self, tape: &mut Tape<T>, map: Var) -> Result<Var> {
        let b = tape.shape(map)[0];
        let flat = tape.reshape(map, &[b, self.n_c, self.n])?;
        tape.transpose_last2(flat)
    }

    /// Feature branch: stratified semantics `F`, `[B, n, n_c]`.
    pub fn extract_semantics<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        let map = self.fem.forward(tape, vars, x, true)?;
        self.stratify(tape, map)
    }

    /// Activation branch: gate `A = σ(f_sam(x))`, `[B, n, n_c]`.
    pub fn activate<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        let sam = self
            .sam
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model has no activation branch".into()))?;
        let map = sam.forward(tape, vars, x, false)?;
        let pre = self.stratify(tape, map)?;
        Ok(tape.sigmoid(pre))
    }

    /// Shared affine classifier over the last axis: `[.., n_c] -> [.., K]`.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, v: Var) -> Result<Var> {
        let s = tape.shape(v).to_vec();
        if s.last() != Some(&self.n_c) {
            return Err(Error::shape("classify", &s, &[self.n_c]));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let flat = if s.len() == 2 { v } else { tape.reshape(v, &[rows, self.n_c])? };
        let z = tape.matmul(flat, lookup(vars, CLS_WEIGHT)?)?;
        let z = tape.add_bias(z, lookup(vars, CLS_BIAS)?)?;
        if s.len() == 2 {
            Ok(z)
        } else {
            let mut out = s[..s.len() - 1].to_vec();
            out.push(self.cfg.num_classes);
            tape.reshape(z, &out)
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<ModelOutput> {
        let features = self.extract_semantics(tape, vars, x)?;
        let pooled = match self.cfg.pooling {
            Pooling::Mean => tape.mean_axis(features, 1)?,
            Pooling::Sum => tape.sum_axis(features, 1)?,
        };
        let baseline_logits = self.classify(tape, vars, pooled)?;
        let (strat_logits, activations) = if self.sam.is_some() {
            let a = self.activate(tape, vars, x)?;
            let gated = tape.mul(features, a)?;
            (Some(self.classify(tape, vars, gated)?), Some(a))
        } else {
            (None, None)
        };
        Ok(ModelOutput {
            baseline_logits,
            strat_logits,
            features,
            activations,
        })
    }

    /// Untracked forward pass over `[B, C, H, W]` images.
    pub fn infer<T: Real>(&self, params: &ParamSet<T>, images: Tensor<T>) -> Result<Inference<T>> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(images);
        let out = self.forward(&mut tape, &vars, x)?;
        Ok(Inference {
            baseline_logits: tape.value(out.baseline_logits).clone(),
            strat_logits: out.strat_logits.map(|v| tape.value(v).clone()),
            features: tape.value(out.features).clone(),
            activations: out.activations.map(|v| tape.value(v).clone()),
        })
    }
}

/// Per-class interventional scores `Σ_t log softmax_k(z_t)` for one sample's
/// `[n, K]` logits block, in double precision.
pub fn interventional_scores<T: Real>(strat_logits: &[T], k: usize) -> Vec<f64> {
    let mut score = vec![0.0f64; k];
    for row in strat_logits.chunks(k) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        for (s, v) in score.iter_mut().zip(row) {
            *s += v.as_f64() - lse;
        }
    }
    score
}

/// First index of the maximum.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Inference<T> {
    pub fn batch(&self) -> usize {
        self.baseline_logits.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.baseline_logits.shape()[1]
    }

    pub fn predict(&self, mode: PredictMode) -> Result<Vec<usize>> {
        predict(&self.baseline_logits, self.strat_logits.as_ref(), mode)
    }

    /// Mean over stratifications of `F` (baseline) or of `F ⊙ A`
    /// (interventional), one `n_c`-vector per sample.
    pub fn pooled_features(&self, mode: PredictMode) -> Result<Vec<Vec<f64>>> {
        let s = self.features.shape();
        let (b, n, n_c) = (s[0], s[1], s[2]);
        let f = self.features.data();
        let gate = match mode {
            PredictMode::Baseline => None,
            PredictMode::Interventional => Some(
                self.activations
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("model has no activation branch".into()))?
                    .data(),
            ),
        };
        Ok((0..b)
            .map(|bi| {
                let mut v = vec![0.0; n_c];
                for t in 0..n {
                    let off = (bi * n + t) * n_c;
                    for (c, acc) in v.iter_mut().enumerate() {
                        let g = gate.map_or(1.0, |a| a[off + c].as_f64());
                        *acc += f[off + c].as_f64() * g;
                    }
                }
                v.iter_mut().for_each(|x| *x /= n as f64);
                v
            })
            .collect())
    }
}

/// Class decision per sample; ties go to the smallest class index.
pub fn predict<T: Real>(
    baseline_logits: &Tensor<T>,
    strat_logits: Option<&Tensor<T>>,
    mode: PredictMode,
) -> Result<Vec<usize>> {
    let k = baseline_logits.shape()[1];
    match mode {
        PredictMode::Baseline => Ok(baseline_logits
            .data()
            .chunks(k)
            .map(|row| argmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
            .collect()),
        PredictMode::Interventional => {
            let strat = strat_logits.ok_or_else(|| {
                Error::InvalidConfig("interventional prediction needs the activation branch".into())
            })?;
            let s = strat.shape();
            let per_sample = s[1] * s[2];
            Ok(strat
                .data()
                .chunks(per_sample)
                .map(|blk| argmax(&interventional_scores(blk, s[2])))
                .collect())
        }
    }
}
