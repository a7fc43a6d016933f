use std::path::Path;

use image::{ImageFormat, RgbImage};

use super::{ColorSpace, ImageTensor};
use crate::{PddError, Result};

/// Quantizes a `[0, 1]` sample to 8 bits, rounding halves up.
#[inline]
pub(crate) fn to_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub(crate) fn to_rgb8(img: &ImageTensor) -> Result<RgbImage> {
    if img.channels() != 3 || img.colorspace() != ColorSpace::Rgb {
        return Err(PddError::InvalidInput("8-bit export needs a 3-channel RGB image".into()));
    }
    let bytes = img.data().iter().map(|&v| to_u8(v)).collect();
    RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| PddError::InvalidShape("buffer does not match dimensions".into()))
}

pub(crate) fn from_rgb8(rgb: &RgbImage) -> Result<ImageTensor> {
    let data = rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageTensor::new(rgb.height() as usize, rgb.width() as usize, 3, data, ColorSpace::Rgb)
}

/// Reads any 8-bit PNG as RGB; the path is kept as the image's `meta`.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let reader = image::ImageReader::open(path).map_err(|source| PddError::Io { path: path.into(), source })?;
    let decoded = reader.with_guessed_format().map_err(|source| PddError::Io { path: path.into(), source })?.decode()?;
    Ok(from_rgb8(&decoded.to_rgb8())?.with_meta(path.display().to_string()))
}

pub fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    to_rgb8(img)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}
