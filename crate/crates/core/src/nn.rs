//! Parameter containers, initialization, and the VGG-style conv backbone.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// One conv → relu → (optional 2×2 max-pool) stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_pool")]
    pub pool: bool,
}

fn default_kernel() -> usize {
    3
}

fn default_pool() -> bool {
    true
}

impl BlockConfig {
    pub fn new(channels: usize, kernel: usize, pool: bool) -> Self {
        Self {
            channels,
            kernel,
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub blocks: Vec<BlockConfig>,
}

impl Default for BackboneConfig {
    /// Desk-scale default: 32×32 grayscale in, 4×4×64 feature map out.
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_size: 32,
            blocks: vec![
                BlockConfig::new(32, 3, true),
                BlockConfig::new(64, 3, true),
                BlockConfig::new(64, 3, true),
            ],
        }
    }
}

impl BackboneConfig {
    /// VGG-style stack with the given channel widths, 3×3 kernels, pooling
    /// after every block.
    pub fn vgg(input_channels: usize, input_size: usize, widths: &[usize]) -> Self {
        Self {
            input_channels,
            input_size,
            blocks: widths.iter().map(|&c| BlockConfig::new(c, 3, true)).collect(),
        }
    }

    /// Side of the square output map, after validating the whole schedule.
    pub fn final_spatial(&self) -> Result<usize> {
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::InvalidConfig(
                "backbone input channels and size must be positive".into(),
            ));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("backbone needs at least one block".into()));
        }
        let mut size = self.input_size;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: channels and kernel must be positive"
                )));
            }
            let pad = b.kernel / 2;
            if b.kernel > size + 2 * pad {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: kernel {} larger than padded input {size}",
                    b.kernel
                )));
            }
            size = size + 2 * pad - b.kernel + 1;
            if b.pool {
                if size < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "block {i}: pooling reduces spatial size {size} below 1"
                    )));
                }
                size /= 2;
            }
        }
        Ok(size)
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    /// Number of stratifications `n = s²`.
    pub fn stratifications(&self) -> Result<usize> {
        let s = self.final_spatial()?;
        Ok(s * s)
    }
}

/// Which parameter group a name belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Feature-extraction backbone (`fem.*`).
    Sem,
    /// Semantic-activation backbone (`sam.*`).
    Sam,
    /// Shared classifier (`cls.*`).
    Cls,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "fem" => Some(Self::Sem),
            "sam" => Some(Self::Sam),
            "cls" => Some(Self::Cls),
            _ => None,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Self::Sem => "fem",
            Self::Sam => "sam",
            Self::Cls => "cls",
        }
    }
}

/// Named model parameters, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Tensor<T>>,
}

/// Tape handles for a registered [`ParamSet`].
pub type ParamVars = BTreeMap<String, Var>;

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if ParamGroup::of(&name).is_none() {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` is not in the fem/sam/cls groups"
            )));
        }
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(move |(n, _)| ParamGroup::of(n) == Some(group))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, tracked: bool) -> ParamVars {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), tracked)))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet<T>) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        Ok(())
    }
}

pub(crate) fn lookup(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
}

/// He-normal draw: zero mean, variance `2 / fan_in`.
pub fn he_init<T: Real>(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("he_init: fan_in must be >= 1".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = rng::stream(seed, "he_init", &[]);
    Ok(Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng))))
}

/// Per-parameter seed: each tensor's draw depends only on the root seed and
/// its own name.
pub(crate) fn param_seed(seed: u64, name: &str) -> u64 {
    rng::derive_seed(seed, name, &[])
}

/// A built backbone: validated config plus the parameter namespace it reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    prefix: String,
    final_spatial: usize,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, prefix: impl Into<String>) -> Result<Self> {
        let final_spatial = cfg.final_spatial()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
            final_spatial,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn final_spatial(&self) -> usize {
        self.final_spatial
    }

    pub fn final_channels(&self) -> usize {
        self.cfg.final_channels()
    }

    fn names(&self, i: usize) -> (String, String) {
        (
            format!("{}.block{i}.conv.weight", self.prefix),
            format!("{}.block{i}.conv.bias", self.prefix),
        )
    }

    /// He-normal weights, zero biases.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamSet<T>> {
        let mut ps = ParamSet::new();
        let mut c_in = self.cfg.input_channels;
        for (i, b) in self.cfg.blocks.iter().enumerate() {
            let (wn, bn) = self.names(i);
            let fan_in = c_in * b.kernel * b.kernel;
            let w = he_init(&[b.channels, c_in, b.kernel, b.kernel], fan_in, param_seed(seed, &wn))?;
            ps.insert(wn, w)?;
            ps.insert(bn, Tensor::zeros(&[b.channels]))?;
            c_in = b.channels;
        }
        Ok(ps)
    }

    /// `[B, C, H, W] -> [B, n_c, s, s]`. When `final_relu` is false the last
    /// block emits its raw (pooled) convolution output.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var, final_relu: bool) -> Result<Var> {
        let sx = tape.shape(x);
        let expect = [self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size];
        if sx.len() != 4 || sx[1..] != expect {
            let mut want = vec![sx.first().copied().unwrap_or(1)];
            want.extend_from_slice(&expect);
            return Err(Error::shape("backbone input", sx, &want));
        }
        let mut h = x;
        let last = self.cfg.blocks.len() - 1;
        for (i, b) in self.cfg.blocks.iter().enumerate() {
            let (wn, bn) = self.names(i);
            h = tape.conv2d(h, lookup(vars, &wn)?, lookup(vars, &bn)?, 1, b.kernel / 2)?;
            if i < last || final_relu {
                h = tape.relu(h);
            }
            if b.pool {
                h = tape.maxpool2d(h, 2, 2)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_geometry_is_4x4() {
        let cfg = BackboneConfig::vgg(1, 128, &[64, 128, 256, 512, 512]);
        assert_eq!(cfg.final_spatial().unwrap(), 4);
        assert_eq!(cfg.final_channels(), 512);
        assert_eq!(cfg.stratifications().unwrap(), 16);
    }

    #[test]
    fn default_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.final_spatial().unwrap(), 4);
        assert_eq!(cfg.final_channels(), 64);
    }

    #[test]
    fn over_pooling_is_rejected() {
        let cfg = BackboneConfig::vgg(1, 8, &[4, 4, 4, 4]);
        assert!(matches!(cfg.final_spatial(), Err(Error::InvalidConfig(_))));
        assert!(Backbone::new(cfg, "fem").is_err());
    }

    #[test]
    fn forward_shape_32_two_pools() {
        let cfg = BackboneConfig::vgg(1, 32, &[16, 64]);
        let bb = Backbone::new(cfg, "fem").unwrap();
        let ps = bb.init_params::<f32>(3).unwrap();
        let mut tape = Tape::new();
        let vars = ps.register(&mut tape, false);
        let x = tape.constant(Tensor::full(&[2, 1, 32, 32], 0.5));
        let y = bb.forward(&mut tape, &vars, x, true).unwrap();
        assert_eq!(tape.shape(y), &[2, 64, 8, 8]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let bb = Backbone::new(BackboneConfig::default(), "fem").unwrap();
        let ps = bb.init_params::<f32>(3).unwrap();
        let mut tape = Tape::new();
        let vars = ps.register(&mut tape, false);
        let x = tape.constant(Tensor::full(&[2, 1, 16, 16], 0.5));
        assert!(bb.forward(&mut tape, &vars, x, true).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let bb = Backbone::new(BackboneConfig::default(), "fem").unwrap();
        let a = bb.init_params::<f32>(11).unwrap();
        let b = bb.init_params::<f32>(11).unwrap();
        assert_eq!(a, b);
        let c = bb.init_params::<f32>(12).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn he_variance_within_five_percent() {
        let fan_in = 27;
        let t: Tensor<f64> = he_init(&[100_000], fan_in, 5).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / fan_in as f64;
        assert!((var - target).abs() / target < 0.05, "{var} vs {target}");
        assert!(mean.abs() < 4.0 * (target / n).sqrt());
        assert_eq!(t, he_init(&[100_000], fan_in, 5).unwrap());
        assert!(he_init::<f64>(&[3], 0, 5).is_err());
    }

    #[test]
    fn param_set_rejects_duplicates_and_foreign_names() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("cls.weight", Tensor::zeros(&[2, 2])).unwrap();
        assert!(ps.insert("cls.weight", Tensor::zeros(&[2, 2])).is_err());
        assert!(ps.insert("other.weight", Tensor::zeros(&[2])).is_err());
        assert_eq!(ps.group(ParamGroup::Cls).count(), 1);
    }
}
