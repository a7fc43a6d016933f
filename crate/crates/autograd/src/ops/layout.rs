//! Layout-changing ops on NCHW tensors: pixel shuffle, channel concat/slice, 2x2 max pooling.

use crate::{AutogradError, Real, Result, Tensor};

/// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, cr, h, w) = x.dims4()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(AutogradError::Shape(format!("pixel_shuffle({r}) on {} channels", cr)));
    }
    let c = cr / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ic = ci * r * r + i * r + j;
                    let plane = &src[((ni * cr + ic) * h) * w..((ni * cr + ic + 1) * h) * w];
                    for y in 0..h {
                        let dst_row = ((ni * c + ci) * ho + y * r + i) * wo;
                        for xx in 0..w {
                            out[dst_row + xx * r + j] = plane[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Adjoint of [`pixel_shuffle`] (also its inverse).
pub fn pixel_unshuffle<T: Real>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = y.dims4()?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(AutogradError::Shape(format!("pixel_unshuffle({r}) on {ho}x{wo}")));
    }
    let (h, w, cr) = (ho / r, wo / r, c * r * r);
    let mut out = vec![T::zero(); y.numel()];
    let src = y.data();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let oc = ci * r * r + i * r + j;
                    for yy in 0..h {
                        let src_row = ((ni * c + ci) * ho + yy * r + i) * wo;
                        let dst_row = ((ni * cr + oc) * h + yy) * w;
                        for xx in 0..w {
                            out[dst_row + xx] = src[src_row + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cr, h, w], out)
}

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| AutogradError::Shape("empty concat".into()))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(AutogradError::Shape(format!(
                "concat: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    Tensor::new(&[n, total_c, h, w], out)
}

pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if start + len > c {
        return Err(AutogradError::Shape(format!("channel slice {start}..{} of {c}", start + len)));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        let base = (ni * c + start) * hw;
        out.extend_from_slice(&x.data()[base..base + len * hw]);
    }
    Tensor::new(&[n, len, h, w], out)
}

/// Scatters `grad` (the gradient of a channel slice) back into a zero tensor of `full_shape`.
pub fn unslice_channels<T: Real>(grad: &Tensor<T>, full_shape: &[usize], start: usize) -> Result<Tensor<T>> {
    let (n, len, h, w) = grad.dims4()?;
    let c = full_shape[1];
    let hw = h * w;
    let mut out = Tensor::zeros(full_shape);
    for ni in 0..n {
        let dst = (ni * c + start) * hw;
        out.data_mut()[dst..dst + len * hw].copy_from_slice(&grad.data()[ni * len * hw..(ni + 1) * len * hw]);
    }
    Ok(out)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat argmax index per output.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(AutogradError::Shape(format!("max_pool2 on {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}
