//! 8-bit RGB image files.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use sen_core::encoders::ImageTensor;

use crate::error::{Error, Result};

/// Decodes any supported format, resizing to `size` (height, width) when given.
pub fn load_image(path: &Path, size: Option<(usize, usize)>) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let mut rgb = img.to_rgb8();
    if let Some((h, w)) = size {
        if rgb.height() as usize != h || rgb.width() as usize != w {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
    }
    Ok(ImageTensor::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())?)
}

pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
