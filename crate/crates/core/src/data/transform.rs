use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::Image;
use crate::error::{Error, Result};
use crate::rng;

/// Keeps the centered `crop×crop` window and zeroes everything else. The
/// image keeps its size.
pub fn center_crop_mask(image: &Image, crop: usize) -> Result<Image> {
    if crop == 0 || crop > image.height || crop > image.width {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} does not fit a {}x{} image",
            image.height, image.width
        )));
    }
    let top = (image.height - crop) / 2;
    let left = (image.width - crop) / 2;
    let mut out = Image::zeros(image.height, image.width, image.channels);
    let c = image.channels;
    for y in top..top + crop {
        let start = (y * image.width + left) * c;
        let end = start + crop * c;
        out.data[start..end].copy_from_slice(&image.data[start..end]);
    }
    Ok(out)
}

/// Multiplies every pixel by an independent mean-1 gamma factor with shape
/// `looks`, then clips to [0, 1].
pub fn apply_speckle(image: &Image, looks: f64, seed: u64) -> Result<Image> {
    let mut rng = rng::stream(seed, "speckle", &[]);
    speckle_with(image, looks, &mut rng)
}

pub(crate) fn speckle_gamma(looks: f64) -> Result<Gamma<f64>> {
    if !(looks >= 1.0 && looks.is_finite()) {
        return Err(Error::InvalidArgument(format!("speckle looks must be >= 1, got {looks}")));
    }
    Gamma::new(looks, 1.0 / looks).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub(crate) fn speckle_with<R: Rng>(image: &Image, looks: f64, rng: &mut R) -> Result<Image> {
    let gamma = speckle_gamma(looks)?;
    let mut out = image.clone();
    for v in out.data.iter_mut() {
        let f = gamma.sample(rng) as f32;
        *v = (*v * f).clamp(0.0, 1.0);
    }
    Ok(out)
}
