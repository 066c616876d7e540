use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H×W×3` RGB image with channel values in `[0, 1]`, stored row-major
/// with interleaved channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidImage(format!("value {} at offset {bad} outside [0, 1]", pixels[bad])));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self { height, width, pixels }
    }

    /// 8-bit RGB bytes in row-major order.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| libm::round(v * 255.0).clamp(0.0, 255.0) as u8).collect()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Values are clamped into `[0, 1]`.
    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[o + c] = rgb[c].clamp(0.0, 1.0);
        }
    }
}

/// Splits `image` into non-overlapping `patch×patch` tiles in row-major
/// tile order. Row `i` of the result is tile `i` flattened as
/// `(row, col, channel)`, `patch²·3` values.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Tensor> {
    let (h, w) = (image.height, image.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::PatchDimension { height: h, width: w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * 3;
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..patch {
                let start = ((ty * patch + py) * w + tx * patch) * 3;
                data.extend_from_slice(&image.pixels[start..start + patch * 3]);
            }
        }
    }
    Ok(Tensor::from_vec(gh * gw, row_len, data))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, patch: usize) -> Result<ImageTensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::PatchDimension { height, width, patch });
    }
    let (gh, gw) = (height / patch, width / patch);
    if patches.shape() != (gh * gw, patch * patch * 3) {
        return Err(Error::Shape(format!(
            "expected {}x{} patches, got {:?}",
            gh * gw,
            patch * patch * 3,
            patches.shape()
        )));
    }
    let mut pixels = alloc::vec![0.0; height * width * 3];
    for ty in 0..gh {
        for tx in 0..gw {
            let tile = patches.row(ty * gw + tx);
            for py in 0..patch {
                let start = ((ty * patch + py) * width + tx * patch) * 3;
                pixels[start..start + patch * 3].copy_from_slice(&tile[py * patch * 3..(py + 1) * patch * 3]);
            }
        }
    }
    ImageTensor::new(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = seeded(seed);
        ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn clip_resolution_gives_192_patches() {
        let img = ImageTensor::filled(384, 128, [0.5; 3]);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), (192, 768));
    }

    #[test]
    fn single_patch_is_whole_image() {
        let img = random_image(16, 16, 3);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.rows(), 1);
        assert_eq!(p.row(0), img.pixels());
    }

    #[test]
    fn four_patches_round_trip() {
        let img = random_image(32, 32, 4);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.rows(), 4);
        assert_eq!(unpatchify(&p, 32, 32, 16).unwrap(), img);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let img = ImageTensor::filled(30, 32, [0.0; 3]);
        assert!(matches!(patchify(&img, 16), Err(Error::PatchDimension { .. })));
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(ImageTensor::new(1, 1, alloc::vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(1, 1, alloc::vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(ImageTensor::new(1, 2, alloc::vec![0.0; 3]).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        // 2x2 grid of 1-pixel patches with distinct red values.
        let img = ImageTensor::new(2, 2, alloc::vec![0.1, 0., 0., 0.2, 0., 0., 0.3, 0., 0., 0.4, 0., 0.]).unwrap();
        let p = patchify(&img, 1).unwrap();
        let reds: Vec<f64> = (0..4).map(|i| p.get(i, 0)).collect();
        assert_eq!(reds, [0.1, 0.2, 0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn reassembly_is_exact(gh in 1usize..5, gw in 1usize..5, patch in 1usize..6, seed in any::<u64>()) {
            let img = random_image(gh * patch, gw * patch, seed);
            let p = patchify(&img, patch).unwrap();
            prop_assert_eq!(p.rows(), gh * gw);
            prop_assert_eq!(unpatchify(&p, gh * patch, gw * patch, patch).unwrap(), img);
        }
    }
}
