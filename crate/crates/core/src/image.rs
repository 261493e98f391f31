//! 8-bit grayscale images and random patch extraction.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::metrics::quantize;
use crate::rng::Stream;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(invalid!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Promotes to a `(1, 1, H, W)` float tensor on the 0-255 scale.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p)).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("pixel count checked")
    }

    /// Clips and rounds batch item 0 of a single-channel tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.batch != 1 || s.channels != 1 {
            return Err(invalid!("expected a (1, 1, H, W) image tensor, got {s}"));
        }
        let pixels = quantize(t).data().iter().map(|&v| v as u8).collect();
        Self::new(s.width, s.height, pixels)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        if top + height > self.height || left + width > self.width {
            return Err(invalid!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height,
                self.width
            ));
        }
        Ok(Tensor::from_fn(Shape::new(1, 1, height, width), |_, _, y, x| {
            f64::from(self.pixels[(top + y) * self.width + left + x])
        }))
    }
}

/// Clean patches stacked along the batch axis, plus the indices of images that
/// were too small to contribute.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub patches: Tensor,
    pub corners: Vec<(usize, usize, usize)>,
    pub skipped: Vec<usize>,
}

/// Picks an image uniformly among those at least `patch` pixels in both
/// dimensions, then a uniformly random top-left corner, `count` times.
pub fn sample_patches(dataset: &[ImageBuffer], patch: usize, count: usize, rng: &mut Stream) -> Result<PatchBatch> {
    if patch == 0 || count == 0 {
        return Err(invalid!("patch size and count must be positive"));
    }
    let (eligible, skipped): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset[i].width >= patch && dataset[i].height >= patch);
    if eligible.is_empty() {
        return Err(invalid!(
            "no image among {} is at least {patch}x{patch}",
            dataset.len()
        ));
    }
    let mut parts = Vec::with_capacity(count);
    let mut corners = Vec::with_capacity(count);
    for _ in 0..count {
        let i = eligible[rng.random_range(0..eligible.len())];
        let img = &dataset[i];
        let top = rng.random_range(0..=img.height - patch);
        let left = rng.random_range(0..=img.width - patch);
        parts.push(img.crop(top, left, patch, patch)?);
        corners.push((i, top, left));
    }
    Ok(PatchBatch {
        patches: Tensor::concat_batch(&parts)?,
        corners,
        skipped,
    })
}
