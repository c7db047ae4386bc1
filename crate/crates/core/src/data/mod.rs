//! Datasets: manifests, PPM images, the synthetic generator and PK sampling.

pub mod manifest;
pub mod ppm;
pub mod sampler;
pub mod synthetic;

pub use manifest::{DatasetManifest, Record, Split, TrainView};
pub use ppm::RgbImage;
pub use sampler::PkSampler;
pub use synthetic::{generate, render, SyntheticSpec};

use crate::error::{config, Result};
use crate::par;
use crate::tensor::Tensor;

/// Maps 8-bit RGB to NHWC floats in [-1, 1].
pub fn image_to_pixels(img: &RgbImage) -> Vec<f64> {
    img.pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 - 0.5) / 0.5)
        .collect()
}

/// Decoded, normalized images for a set of manifest records, all `size × size`.
#[derive(Clone, Debug)]
pub struct ImageCache {
    pub size: usize,
    pixels: Vec<Vec<f64>>,
}

impl ImageCache {
    pub fn load(manifest: &DatasetManifest, records: &[usize], size: usize) -> Result<Self> {
        let loaded = par::map_range(records.len(), true, |i| {
            let r = &manifest.records[records[i]];
            let path = manifest.resolve(r);
            let img = RgbImage::load(&path)?;
            if img.width != size || img.height != size {
                return Err(config(format!(
                    "{} is {}x{}, model expects {size}x{size}",
                    path.display(),
                    img.width,
                    img.height
                )));
            }
            Ok(image_to_pixels(&img))
        });
        Ok(Self {
            size,
            pixels: loaded.into_iter().collect::<Result<_>>()?,
        })
    }

    pub fn from_pixels(size: usize, pixels: Vec<Vec<f64>>) -> Self {
        Self { size, pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Stacks cached images `idx` into a `(B, H, W, 3)` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let per = self.size * self.size * 3;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.pixels[i]);
        }
        Tensor::from_vec(&[idx.len(), self.size, self.size, 3], data)
    }
}
