use super::{ColorSpace, ImageTensor};
use crate::{PddError, Result};

/// Row-major 2-D array of coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// The three detail subbands of one channel at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailBands {
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

/// Multi-level orthonormal Haar decomposition of every channel.
///
/// `details[k][c]` holds level `k + 1` (finest first); `ll[c]` is the coarsest approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletSubbands {
    pub level: usize,
    pub colorspace: ColorSpace,
    pub ll: Vec<Plane>,
    pub details: Vec<Vec<DetailBands>>,
}

impl WaveletSubbands {
    /// Sum of squared coefficients over all subbands.
    pub fn energy(&self) -> f64 {
        let sq = |p: &Plane| p.data.iter().map(|v| v * v).sum::<f64>();
        self.ll.iter().map(sq).sum::<f64>()
            + self.details.iter().flatten().map(|d| sq(&d.lh) + sq(&d.hl) + sq(&d.hh)).sum::<f64>()
    }
}

fn analyze(p: &Plane) -> (Plane, DetailBands) {
    let (h, w) = (p.height / 2, p.width / 2);
    let mut ll = Plane::zeros(h, w);
    let mut lh = Plane::zeros(h, w);
    let mut hl = Plane::zeros(h, w);
    let mut hh = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let a = p.data[2 * y * p.width + 2 * x];
            let b = p.data[2 * y * p.width + 2 * x + 1];
            let c = p.data[(2 * y + 1) * p.width + 2 * x];
            let d = p.data[(2 * y + 1) * p.width + 2 * x + 1];
            let i = y * w + x;
            ll.data[i] = (a + b + c + d) * 0.5;
            lh.data[i] = (a - b + c - d) * 0.5;
            hl.data[i] = (a + b - c - d) * 0.5;
            hh.data[i] = (a - b - c + d) * 0.5;
        }
    }
    (ll, DetailBands { lh, hl, hh })
}

fn synthesize(ll: &Plane, d: &DetailBands) -> Plane {
    let (h, w) = ll.shape();
    let mut out = Plane::zeros(2 * h, 2 * w);
    let ow = 2 * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (s, lh, hl, hh) = (ll.data[i], d.lh.data[i], d.hl.data[i], d.hh.data[i]);
            out.data[2 * y * ow + 2 * x] = (s + lh + hl + hh) * 0.5;
            out.data[2 * y * ow + 2 * x + 1] = (s - lh + hl - hh) * 0.5;
            out.data[(2 * y + 1) * ow + 2 * x] = (s + lh - hl - hh) * 0.5;
            out.data[(2 * y + 1) * ow + 2 * x + 1] = (s - lh - hl + hh) * 0.5;
        }
    }
    out
}

/// Orthonormal 2-D Haar transform with `levels` recursive splits of the approximation band.
pub fn haar_forward(img: &ImageTensor, levels: usize) -> Result<WaveletSubbands> {
    if levels == 0 {
        return Err(PddError::InvalidInput("wavelet level must be at least 1".into()));
    }
    let div = 1usize << levels.min(usize::BITS as usize - 1);
    if img.height() % div != 0 || img.width() % div != 0 {
        return Err(PddError::InvalidShape(format!(
            "{}x{} not divisible by 2^{levels}",
            img.height(),
            img.width()
        )));
    }
    let mut ll: Vec<Plane> = (0..img.channels())
        .map(|c| Plane { height: img.height(), width: img.width(), data: img.plane(c) })
        .collect();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (next, bands): (Vec<_>, Vec<_>) = ll.iter().map(analyze).unzip();
        ll = next;
        details.push(bands);
    }
    Ok(WaveletSubbands { level: levels, colorspace: img.colorspace(), ll, details })
}

/// Exact inverse of [`haar_forward`]. The reconstruction is clipped into `[0, 1]`
/// so that arbitrary (e.g. edited) subbands still yield a valid image.
pub fn haar_inverse(sub: &WaveletSubbands) -> Result<ImageTensor> {
    if sub.level == 0 || sub.details.len() != sub.level || sub.ll.is_empty() {
        return Err(PddError::InvalidShape("inconsistent wavelet level count".into()));
    }
    let channels = sub.ll.len();
    let mut planes = sub.ll.clone();
    for level in sub.details.iter().rev() {
        if level.len() != channels {
            return Err(PddError::InvalidShape("channel count differs between levels".into()));
        }
        for (p, d) in planes.iter_mut().zip(level) {
            let s = p.shape();
            if p.data.len() != s.0 * s.1 || d.lh.shape() != s || d.hl.shape() != s || d.hh.shape() != s {
                return Err(PddError::InvalidShape(format!("subband shapes do not match {s:?}")));
            }
            *p = synthesize(p, d);
        }
    }
    let (h, w) = planes[0].shape();
    if planes.iter().any(|p| p.shape() != (h, w)) {
        return Err(PddError::InvalidShape("channels have different sizes".into()));
    }
    let data: Vec<Vec<f64>> = planes.into_iter().map(|p| p.data).collect();
    ImageTensor::from_planes_clipped(h, w, &data, sub.colorspace)
}
