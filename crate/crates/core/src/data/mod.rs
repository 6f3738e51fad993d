//! Samples, datasets, synthetic generation, and manifest ingestion.

mod manifest;
mod synthetic;
mod transform;

pub use manifest::{export_dataset, load_manifest, MANIFEST_FILE, META_FILE};
pub use synthetic::{generate_synthetic, generate_sample, render_layers, Shape, SyntheticSpec};
pub use transform::{apply_speckle, center_crop_mask};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// Grayscale (or multi-channel) image, `H×W×C` row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * channels != data.len() || data.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width}x{channels} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub split: Split,
    /// Foreground silhouette, `H×W` (synthetic data only).
    pub fg_mask: Option<Vec<bool>>,
    /// Background texture id (synthetic data only).
    pub bg_id: Option<usize>,
}

/// An immutable collection of samples with shared image geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let k = class_names.len();
        if let Some(s) = samples.iter().find(|s| s.label >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {k} classes",
                s.label
            )));
        }
        if let Some(first) = samples.first() {
            let geom = (first.image.height, first.image.width, first.image.channels);
            if samples
                .iter()
                .any(|s| (s.image.height, s.image.width, s.image.channels) != geom)
            {
                return Err(Error::InvalidArgument("images differ in size".into()));
            }
        }
        Ok(Self {
            samples,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(H, W, C)` of the images, if any.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.image.height, s.image.width, s.image.channels))
    }

    /// Samples of one split, order preserved.
    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    /// Applies `f` to every image.
    pub fn map_images(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: f(&s.image)?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            class_names: self.class_names.clone(),
        })
    }

    /// `[B, C, H, W]` batch of the samples at `indices`.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let (h, w, c) = self
            .image_shape()
            .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            let img = &self.samples[i].image;
            for ch in 0..c {
                for p in 0..h * w {
                    data.push(img.data[p * c + ch]);
                }
            }
        }
        Tensor::new(vec![indices.len(), c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_is_channel_major() {
        let img = Image::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = Sample {
            image: img,
            label: 0,
            split: Split::Train,
            fg_mask: None,
            bg_id: None,
        };
        let ds = Dataset::new(vec![s], vec!["a".into()]).unwrap();
        let t = ds.batch_tensor(&[0]).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1, 2]);
        assert_eq!(t.data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
