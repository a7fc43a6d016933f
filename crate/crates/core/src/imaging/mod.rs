//! Image containers, color conversion, Haar wavelets, resampling and paired cropping.

mod io;
pub mod resample;
mod wavelet;

use pdd_autograd::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{PddError, Result};

pub use io::{read_png, write_png};
pub(crate) use io::{from_rgb8, to_rgb8};
pub use wavelet::{haar_forward, haar_inverse, DetailBands, Plane, WaveletSubbands};

/// BT.601 luma weights for R, G, B.
pub const LUMA_BT601: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// `H x W x C` image with interleaved `f64` samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    colorspace: ColorSpace,
    meta: Option<String>,
}

impl ImageTensor {
    /// Validates shape, finiteness and the `[0, 1]` range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, colorspace: ColorSpace) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(PddError::InvalidShape(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(PddError::InvalidShape(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(PddError::InvalidShape(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PddError::InvalidInput(format!("sample {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data, colorspace, meta: None })
    }

    /// Clamps every sample into `[0, 1]` first; non-finite samples are rejected.
    pub fn new_clipped(height: usize, width: usize, channels: usize, data: Vec<f64>, colorspace: ColorSpace) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PddError::InvalidInput("non-finite sample".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(height, width, channels, data, colorspace)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, 3, data, ColorSpace::Rgb)
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data, ColorSpace::Rgb)
    }

    pub fn with_meta(mut self, meta: impl Into<String>) -> Self {
        self.meta = Some(meta.into());
        self
    }

    pub fn meta(&self) -> Option<&str> {
        self.meta.as_deref()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Contiguous copy of channel `c` (row-major `H x W`).
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Rebuilds an image from per-channel planes, clipping into `[0, 1]`.
    pub fn from_planes_clipped(height: usize, width: usize, planes: &[Vec<f64>], colorspace: ColorSpace) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, p) in planes.iter().enumerate() {
            if p.len() != height * width {
                return Err(PddError::InvalidShape("plane size mismatch".into()));
            }
            for (i, &v) in p.iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Self::new_clipped(height, width, channels, data, colorspace)
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width || h == 0 || w == 0 {
            return Err(PddError::InvalidInput(format!(
                "crop {h}x{w} at ({y},{x}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Self { height: h, width: w, channels: c, data, colorspace: self.colorspace, meta: self.meta.clone() })
    }

    fn same_shape(&self, other: &Self) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(PddError::InvalidShape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Luma plane as a single-channel image (converting from RGB when needed).
    pub fn luma(&self) -> Result<ImageTensor> {
        let y = match (self.colorspace, self.channels) {
            (ColorSpace::YCbCr, _) | (_, 1) => self.plane(0),
            (ColorSpace::Rgb, 3) => rgb_to_ycbcr(self)?.plane(0),
            _ => unreachable!("channel count validated on construction"),
        };
        ImageTensor::new_clipped(self.height, self.width, 1, y, ColorSpace::YCbCr)
    }

    /// Per-channel sample mean.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / (self.height * self.width) as f64)
            .collect()
    }
}

/// BT.601 full-range RGB to YCbCr; Y ends up in channel 0.
pub fn rgb_to_ycbcr(img: &ImageTensor) -> Result<ImageTensor> {
    if img.colorspace != ColorSpace::Rgb || img.channels != 3 {
        return Err(PddError::InvalidInput(format!(
            "rgb_to_ycbcr needs a 3-channel RGB image, got {:?} with {} channels",
            img.colorspace, img.channels
        )));
    }
    let [kr, kg, kb] = LUMA_BT601;
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        let y = kr * r + kg * g + kb * b;
        let cb = 0.5 + (b - y) / (2.0 * (1.0 - kb));
        let cr = 0.5 + (r - y) / (2.0 * (1.0 - kr));
        data.extend_from_slice(&[y, cb, cr]);
    }
    let mut out = ImageTensor::new_clipped(img.height, img.width, 3, data, ColorSpace::YCbCr)?;
    out.meta = img.meta.clone();
    Ok(out)
}

/// Packs RGB images into an NCHW tensor.
pub fn images_to_tensor<T: Real>(images: &[ImageTensor]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| PddError::InvalidInput("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        first.ensure_same_shape(img, "batch")?;
        for ch in 0..c {
            data.extend(img.data.iter().skip(ch).step_by(c).map(|&v| T::from_f64(v)));
        }
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data)?)
}

/// Unpacks an NCHW tensor into images, clipping into `[0, 1]`.
pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = t.dims4()?;
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let src = &t.data()[i * per..(i + 1) * per];
            let planes: Vec<Vec<f64>> = (0..c)
                .map(|ch| src[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
                .collect();
            ImageTensor::from_planes_clipped(h, w, &planes, ColorSpace::Rgb)
        })
        .collect()
}

/// An aligned LR/HR patch pair together with the origins it was cut from.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub lr_origin: (usize, usize),
    pub hr_origin: (usize, usize),
}

/// Crops an `lr_size` LR patch and the HR patch covering the same area.
pub fn paired_random_crop(lr: &ImageTensor, hr: &ImageTensor, lr_size: usize, scale: usize, seed: u64) -> Result<PatchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    paired_crop_with(lr, hr, lr_size, scale, &mut rng)
}

pub(crate) fn paired_crop_with(
    lr: &ImageTensor,
    hr: &ImageTensor,
    lr_size: usize,
    scale: usize,
    rng: &mut impl Rng,
) -> Result<PatchPair> {
    if scale == 0 || lr_size == 0 {
        return Err(PddError::InvalidInput("scale and patch size must be positive".into()));
    }
    if hr.height != lr.height * scale || hr.width != lr.width * scale {
        return Err(PddError::InvalidInput(format!(
            "HR {}x{} is not {scale}x LR {}x{}",
            hr.height, hr.width, lr.height, lr.width
        )));
    }
    if lr.height < lr_size || lr.width < lr_size {
        return Err(PddError::InvalidInput(format!(
            "patch {lr_size} larger than LR image {}x{}",
            lr.height, lr.width
        )));
    }
    let i = rng.random_range(0..=lr.height - lr_size);
    let j = rng.random_range(0..=lr.width - lr_size);
    let hr_size = lr_size * scale;
    Ok(PatchPair {
        lr: lr.crop(i, j, lr_size, lr_size)?,
        hr: hr.crop(i * scale, j * scale, hr_size, hr_size)?,
        lr_origin: (i, j),
        hr_origin: (i * scale, j * scale),
    })
}

/// Random square crop of a single image.
pub(crate) fn random_crop_with(img: &ImageTensor, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    if img.height < size || img.width < size {
        return Err(PddError::InvalidInput(format!(
            "patch {size} larger than image {}x{}",
            img.height, img.width
        )));
    }
    let i = rng.random_range(0..=img.height - size);
    let j = rng.random_range(0..=img.width - size);
    img.crop(i, j, size, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ycbcr_luma_values() {
        let gray = ImageTensor::filled(2, 2, [0.5; 3]).unwrap();
        assert!(rgb_to_ycbcr(&gray).unwrap().plane(0).iter().all(|&y| (y - 0.5).abs() < 1e-15));
        let white = ImageTensor::filled(1, 1, [1.0; 3]).unwrap();
        assert!((rgb_to_ycbcr(&white).unwrap().get(0, 0, 0) - 1.0).abs() < 1e-15);
        let red = ImageTensor::filled(1, 1, [1.0, 0.0, 0.0]).unwrap();
        assert!((rgb_to_ycbcr(&red).unwrap().get(0, 0, 0) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn ycbcr_rejects_wrong_input() {
        let rgb = ImageTensor::filled(2, 2, [0.2; 3]).unwrap();
        let ycc = rgb_to_ycbcr(&rgb).unwrap();
        assert!(matches!(rgb_to_ycbcr(&ycc), Err(PddError::InvalidInput(_))));
        let mono = ImageTensor::new(1, 1, 1, vec![0.3], ColorSpace::Rgb).unwrap();
        assert!(rgb_to_ycbcr(&mono).is_err());
    }

    #[test]
    fn constructor_rejects_out_of_range() {
        assert!(ImageTensor::new(1, 1, 3, vec![0.0, 1.2, 0.0], ColorSpace::Rgb).is_err());
        assert!(ImageTensor::new(1, 1, 3, vec![0.0, f64::NAN, 0.0], ColorSpace::Rgb).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 0.0], ColorSpace::Rgb).is_err());
    }

    #[test]
    fn paired_crop_geometry() {
        let lr = ImageTensor::from_fn(60, 64, 3, |y, x, c| ((y * 7 + x * 3 + c) % 255) as f64 / 255.0).unwrap();
        let hr = ImageTensor::from_fn(240, 256, 3, |y, x, c| ((y + x + c) % 255) as f64 / 255.0).unwrap();
        let p = paired_random_crop(&lr, &hr, 48, 4, 9).unwrap();
        assert_eq!((p.lr.height(), p.lr.width()), (48, 48));
        assert_eq!((p.hr.height(), p.hr.width()), (192, 192));
        assert_eq!(p.hr_origin, (4 * p.lr_origin.0, 4 * p.lr_origin.1));
        assert_eq!(p.lr.get(0, 0, 1), lr.get(p.lr_origin.0, p.lr_origin.1, 1));
        assert_eq!(p.hr.get(5, 6, 2), hr.get(p.hr_origin.0 + 5, p.hr_origin.1 + 6, 2));

        let q = paired_random_crop(&lr, &hr, 48, 4, 9).unwrap();
        assert_eq!(p.lr_origin, q.lr_origin);
    }

    #[test]
    fn paired_crop_errors() {
        let lr = ImageTensor::filled(32, 32, [0.1; 3]).unwrap();
        let hr = ImageTensor::filled(128, 128, [0.1; 3]).unwrap();
        assert!(paired_random_crop(&lr, &hr, 48, 4, 0).is_err());
        let bad_hr = ImageTensor::filled(100, 128, [0.1; 3]).unwrap();
        assert!(paired_random_crop(&lr, &bad_hr, 16, 4, 0).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let a = ImageTensor::from_fn(3, 5, 3, |y, x, c| (y * 15 + x * 3 + c) as f64 / 60.0).unwrap();
        let b = ImageTensor::filled(3, 5, [0.25, 0.5, 0.75]).unwrap();
        let t = images_to_tensor::<f64>(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 3, 5]);
        assert_eq!(t.data()[15 + 2], a.get(0, 2, 1));
        let back = tensor_to_images(&t).unwrap();
        assert_eq!(back[0].data(), a.data());
        assert_eq!(back[1].data(), b.data());
    }
}
