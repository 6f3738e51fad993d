//! Confounded synthetic benchmark.
//!
//! Each class owns a polyomino silhouette and a background texture. With
//! probability `rho` a sample is drawn on its own class's texture, otherwise
//! on a uniformly random one, so `rho` sets how much the background alone
//! predicts the label. Setting a different `rho_test` shifts the
//! background–label correlation between train and test.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::transform::speckle_with;
use super::{Dataset, Image, Sample, Split};
use crate::error::{Error, Result};
use crate::rng;

/// Silhouettes on a 3×3 cell grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Bar,
    Ell,
    Tee,
    Cross,
    Zed,
    Square,
    Ring,
    Vee,
    Diagonal,
    Frame,
}

impl Shape {
    pub const ALL: [Shape; 10] = [
        Shape::Bar,
        Shape::Ell,
        Shape::Tee,
        Shape::Cross,
        Shape::Zed,
        Shape::Square,
        Shape::Ring,
        Shape::Vee,
        Shape::Diagonal,
        Shape::Frame,
    ];

    /// Filled `(row, col)` cells.
    pub fn cells(self) -> &'static [(usize, usize)] {
        match self {
            Shape::Bar => &[(0, 1), (1, 1), (2, 1)],
            Shape::Ell => &[(0, 0), (1, 0), (2, 0), (2, 1)],
            Shape::Tee => &[(0, 0), (0, 1), (0, 2), (1, 1), (2, 1)],
            Shape::Cross => &[(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
            Shape::Zed => &[(0, 0), (0, 1), (1, 1), (2, 1), (2, 2)],
            Shape::Square => &[(0, 0), (0, 1), (1, 0), (1, 1)],
            Shape::Ring => &[(0, 0), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)],
            Shape::Vee => &[(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)],
            Shape::Diagonal => &[(0, 0), (1, 1), (2, 2)],
            Shape::Frame => &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)],
        }
    }

    /// 3×3 occupancy after `quarter_turns` clockwise rotations.
    fn grid(self, quarter_turns: usize) -> [[bool; 3]; 3] {
        let mut g = [[false; 3]; 3];
        for &(r, c) in self.cells() {
            let (mut r, mut c) = (r, c);
            for _ in 0..quarter_turns % 4 {
                (r, c) = (c, 2 - r);
            }
            g[r][c] = true;
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Number of classes `K`.
    pub num_classes: usize,
    pub image_size: usize,
    /// Training samples per class.
    pub n_train: usize,
    /// Test samples per class.
    pub n_test: usize,
    /// Background–class correlation of the training split.
    pub rho: f64,
    /// Background–class correlation of the test split; `None` reuses `rho`.
    pub rho_test: Option<f64>,
    /// Silhouette per class; empty selects the first `K` of [`Shape::ALL`].
    pub fg_shapes: Vec<Shape>,
    /// Silhouette extent in pixels (three grid cells).
    pub fg_size: usize,
    /// Maximum placement offset in pixels, per axis.
    pub jitter: usize,
    pub fg_level: f64,
    pub bg_level: f64,
    pub bg_amplitude: f64,
    /// Gamma shape `L` of the multiplicative speckle.
    pub speckle_looks: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            image_size: 32,
            n_train: 500,
            n_test: 250,
            rho: 0.95,
            rho_test: Some(0.0),
            fg_shapes: Vec::new(),
            fg_size: 6,
            jitter: 1,
            fg_level: 0.85,
            bg_level: 0.3,
            bg_amplitude: 0.045,
            speckle_looks: 64.0,
        }
    }
}

const TEXTURE_COMPONENTS: usize = 8;
const BAND_LOW: f64 = 0.06;
const BAND_HIGH: f64 = 0.36;
const BAND_HALF_WIDTH: f64 = 0.12;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("need K >= 2, got {}", self.num_classes));
        }
        let shapes = if self.fg_shapes.is_empty() { Shape::ALL.len() } else { self.fg_shapes.len() };
        if self.num_classes > shapes {
            return bad(format!("{} classes but only {shapes} silhouettes", self.num_classes));
        }
        for (name, r) in [("rho", Some(self.rho)), ("rho_test", self.rho_test)] {
            if let Some(r) = r {
                if !(0.0..=1.0).contains(&r) {
                    return bad(format!("{name} must lie in [0, 1], got {r}"));
                }
            }
        }
        if self.fg_size < 3 || self.fg_size >= self.image_size {
            return bad(format!(
                "fg_size must be in [3, image_size), got {} for {}",
                self.fg_size, self.image_size
            ));
        }
        if self.fg_size + 2 * self.jitter > self.image_size {
            return bad("silhouette plus jitter does not fit the image".into());
        }
        if self.speckle_looks.is_nan() || self.speckle_looks < 1.0 {
            return bad(format!("speckle_looks must be >= 1, got {}", self.speckle_looks));
        }
        if !(0.0..=1.0).contains(&self.fg_level) || !(0.0..=1.0).contains(&self.bg_level) {
            return bad("intensity levels must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn rho_for(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.rho,
            Split::Test => self.rho_test.unwrap_or(self.rho),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
        }
    }

    pub fn shape_of(&self, class: usize) -> Shape {
        if self.fg_shapes.is_empty() {
            Shape::ALL[class]
        } else {
            self.fg_shapes[class]
        }
    }

    /// Centre frequency (cycles per pixel) of texture `id`.
    pub fn texture_frequency(&self, id: usize) -> f64 {
        let k = self.num_classes.max(2) as f64;
        BAND_LOW * (BAND_HIGH / BAND_LOW).powf(id as f64 / (k - 1.0))
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|k| k.to_string()).collect()
    }
}

/// Intermediate renders of one sample, before speckle.
pub struct Layers {
    pub label: usize,
    pub bg_id: usize,
    /// Texture-only render.
    pub background: Vec<f64>,
    /// Texture with the silhouette composited in.
    pub composite: Vec<f64>,
    pub mask: Vec<bool>,
}

fn render_texture<R: Rng>(spec: &SyntheticSpec, id: usize, rng: &mut R) -> Vec<f64> {
    let size = spec.image_size;
    let centre = spec.texture_frequency(id);
    let comps: Vec<(f64, f64, f64)> = (0..TEXTURE_COMPONENTS)
        .map(|_| {
            let f = centre * (1.0 + BAND_HALF_WIDTH * (2.0 * rng.random::<f64>() - 1.0));
            let theta = PI * rng.random::<f64>();
            let phase = 2.0 * PI * rng.random::<f64>();
            (2.0 * PI * f * theta.cos(), 2.0 * PI * f * theta.sin(), phase)
        })
        .collect();
    let norm = (2.0 / TEXTURE_COMPONENTS as f64).sqrt();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let s: f64 = comps
                .iter()
                .map(|&(kx, ky, ph)| (kx * x as f64 + ky * y as f64 + ph).cos())
                .sum();
            out.push((spec.bg_level + spec.bg_amplitude * norm * s).clamp(0.0, 1.0));
        }
    }
    out
}

fn render_mask<R: Rng>(spec: &SyntheticSpec, shape: Shape, rng: &mut R) -> Vec<bool> {
    let size = spec.image_size;
    let cell = (spec.fg_size / 3).max(1);
    let extent = 3 * cell;
    let turns = rng.random_range(0..4usize);
    let j = spec.jitter as i64;
    let dy = rng.random_range(-j..=j) as isize;
    let dx = rng.random_range(-j..=j) as isize;
    let top = (size as isize - extent as isize) / 2 + dy;
    let left = (size as isize - extent as isize) / 2 + dx;
    let grid = shape.grid(turns);
    let mut mask = vec![false; size * size];
    for (r, row) in grid.iter().enumerate() {
        for (c, &on) in row.iter().enumerate() {
            if !on {
                continue;
            }
            for py in 0..cell {
                for px in 0..cell {
                    let y = top + (r * cell + py) as isize;
                    let x = left + (c * cell + px) as isize;
                    if (0..size as isize).contains(&y) && (0..size as isize).contains(&x) {
                        mask[y as usize * size + x as usize] = true;
                    }
                }
            }
        }
    }
    mask
}

fn sample_stream(seed: u64, split: Split, index: usize) -> rand_chacha::ChaCha8Rng {
    let split_id = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    rng::stream(seed, "synthetic", &[split_id, index as u64])
}

fn draw_layers<R: Rng>(spec: &SyntheticSpec, split: Split, index: usize, rng: &mut R) -> Layers {
    let k = spec.num_classes;
    let label = index / spec.count(split).max(1);
    let bg_id = if rng.random::<f64>() < spec.rho_for(split) {
        label
    } else {
        rng.random_range(0..k)
    };
    let background = render_texture(spec, bg_id, rng);
    let mask = render_mask(spec, spec.shape_of(label), rng);
    let composite = background
        .iter()
        .zip(&mask)
        .map(|(&b, &m)| if m { spec.fg_level } else { b })
        .collect();
    Layers {
        label,
        bg_id,
        background,
        composite,
        mask,
    }
}

/// Noise-free renders of sample `index` of `split`.
pub fn render_layers(spec: &SyntheticSpec, seed: u64, split: Split, index: usize) -> Result<Layers> {
    spec.validate()?;
    Ok(draw_layers(spec, split, index, &mut sample_stream(seed, split, index)))
}

/// One speckled sample. A pure function of `(spec, seed, split, index)`;
/// class `index / n_per_class`.
pub fn generate_sample(spec: &SyntheticSpec, seed: u64, split: Split, index: usize) -> Result<Sample> {
    spec.validate()?;
    if index >= spec.count(split) * spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "sample {index} out of range for the {split} split"
        )));
    }
    let mut rng = sample_stream(seed, split, index);
    let layers = draw_layers(spec, split, index, &mut rng);
    let size = spec.image_size;
    let clean = Image::new(
        size,
        size,
        1,
        layers.composite.iter().map(|&v| v as f32).collect(),
    )?;
    let image = speckle_with(&clean, spec.speckle_looks, &mut rng)?;
    Ok(Sample {
        image,
        label: layers.label,
        split,
        fg_mask: Some(layers.mask),
        bg_id: Some(layers.bg_id),
    })
}

/// Full dataset: `n_train` then `n_test` samples per class.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity((spec.n_train + spec.n_test) * spec.num_classes);
    for split in [Split::Train, Split::Test] {
        let n = spec.count(split) * spec.num_classes;
        let part = (0..n)
            .into_par_iter()
            .map(|i| generate_sample(spec, seed, split, i))
            .collect::<Result<Vec<_>>>()?;
        samples.extend(part);
    }
    Dataset::new(samples, spec.class_names())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rho: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 20,
            n_test: 10,
            rho,
            rho_test: None,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn balanced_counts() {
        let ds = generate_synthetic(&small(0.5), 3).unwrap();
        assert_eq!(ds.split(Split::Train).class_counts(), vec![20; 4]);
        assert_eq!(ds.split(Split::Test).class_counts(), vec![10; 4]);
    }

    #[test]
    fn full_correlation_ties_background_to_label() {
        let ds = generate_synthetic(&small(1.0), 3).unwrap();
        assert!(ds.samples.iter().all(|s| s.bg_id == Some(s.label)));
    }

    #[test]
    fn deterministic_per_index() {
        let spec = small(0.9);
        let a = generate_sample(&spec, 5, Split::Train, 17).unwrap();
        let b = generate_sample(&spec, 5, Split::Train, 17).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&spec, 6, Split::Train, 17).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn pixels_in_unit_range_and_mask_nonempty() {
        let ds = generate_synthetic(&small(0.5), 8).unwrap();
        for s in &ds.samples {
            assert!(s.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.fg_mask.as_ref().unwrap().iter().any(|&m| m));
        }
    }

    #[test]
    fn foreground_differs_from_background() {
        let spec = small(0.5);
        for split in [Split::Train, Split::Test] {
            for i in 0..spec.count(split) * spec.num_classes {
                let l = render_layers(&spec, 2, split, i).unwrap();
                for p in 0..l.mask.len() {
                    if l.mask[p] {
                        assert_ne!(l.composite[p], l.background[p]);
                    } else {
                        assert_eq!(l.composite[p], l.background[p]);
                    }
                }
            }
        }
    }

    #[test]
    fn rotations_of_distinct_shapes_never_collide() {
        for (i, a) in Shape::ALL.iter().enumerate() {
            for b in &Shape::ALL[i + 1..] {
                for ta in 0..4 {
                    for tb in 0..4 {
                        assert_ne!(a.grid(ta), b.grid(tb), "{a:?} vs {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SyntheticSpec { rho: 1.5, ..SyntheticSpec::default() };
        assert!(s.validate().is_err());
        s = SyntheticSpec { num_classes: 1, ..SyntheticSpec::default() };
        assert!(s.validate().is_err());
        s = SyntheticSpec { fg_size: 32, ..SyntheticSpec::default() };
        assert!(s.validate().is_err());
        s = SyntheticSpec { num_classes: 11, ..SyntheticSpec::default() };
        assert!(s.validate().is_err());
    }
}
