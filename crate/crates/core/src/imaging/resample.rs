//! Separable image resampling in the style of MATLAB's `imresize`:
//! pixel-center alignment, kernel widening (antialiasing) when shrinking,
//! per-output weight normalization, and edge-replicating borders.

use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::{PddError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Bicubic,
    Bilinear,
    Nearest,
}

/// Keys' cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Source taps `(index, weight)` for every output coordinate along one axis.
pub(crate) fn axis_taps(input: usize, output: usize, interp: Interp) -> Vec<Vec<(usize, f64)>> {
    let scale = output as f64 / input as f64;
    let last = input as isize - 1;
    (0..output)
        .map(|o| {
            // continuous source coordinate of the output pixel center (0-based)
            let u = (o as f64 + 0.5) / scale - 0.5;
            if interp == Interp::Nearest {
                let i = (u + 0.5).floor().clamp(0.0, last as f64) as usize;
                return vec![(i, 1.0)];
            }
            let (kernel, support): (fn(f64) -> f64, f64) = match interp {
                Interp::Bicubic => (cubic, 2.0),
                _ => (triangle, 1.0),
            };
            let shrink = scale.min(1.0);
            let half = support / shrink;
            let first = (u - half).floor() as isize;
            let count = (2.0 * half).ceil() as isize + 2;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(count as usize);
            for k in 0..count {
                let i = first + k;
                let w = shrink * kernel(shrink * (u - i as f64));
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, last) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resamples one row-major plane without clipping.
pub fn resize_plane(src: &[f64], height: usize, width: usize, out_h: usize, out_w: usize, interp: Interp) -> Vec<f64> {
    let tx = axis_taps(width, out_w, interp);
    let ty = axis_taps(height, out_h, interp);
    let mut rows = vec![0.0; height * out_w];
    for y in 0..height {
        let line = &src[y * width..(y + 1) * width];
        for (x, taps) in tx.iter().enumerate() {
            rows[y * out_w + x] = taps.iter().map(|&(i, w)| w * line[i]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (y, taps) in ty.iter().enumerate() {
        let dst = &mut out[y * out_w..(y + 1) * out_w];
        for &(i, w) in taps {
            for (d, s) in dst.iter_mut().zip(&rows[i * out_w..(i + 1) * out_w]) {
                *d += w * s;
            }
        }
    }
    out
}

/// Resizes to `out_h x out_w`; the result is clipped into `[0, 1]`.
pub fn resize(img: &ImageTensor, out_h: usize, out_w: usize, interp: Interp) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(PddError::InvalidShape(format!("resize target {out_h}x{out_w}")));
    }
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| resize_plane(&img.plane(c), img.height(), img.width(), out_h, out_w, interp))
        .collect();
    let out = ImageTensor::from_planes_clipped(out_h, out_w, &planes, img.colorspace())?;
    Ok(match img.meta() {
        Some(m) => out.with_meta(m),
        None => out,
    })
}
