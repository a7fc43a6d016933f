//! Per-location ops across the channel axis, plus the Haar analysis/synthesis pair.

use crate::{AutogradError, Real, Result, Tensor};

/// Log-softmax over axis 1 of an NCHW tensor (independently at every `(n, h, w)`).
pub fn log_softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for ci in 0..c {
                max = max.max(src[base + ci * hw + p]);
            }
            let mut sum = T::zero();
            for ci in 0..c {
                sum += (src[base + ci * hw + p] - max).exp();
            }
            let lse = max + sum.ln();
            for ci in 0..c {
                out[base + ci * hw + p] = src[base + ci * hw + p] - lse;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Backward of log-softmax given its output `y`: `g - softmax * sum_c g`.
pub fn log_softmax_channels_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.dims4()?;
    let hw = h * w;
    let mut out = vec![T::zero(); y.numel()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut gsum = T::zero();
            for ci in 0..c {
                gsum += g.data()[base + ci * hw + p];
            }
            for ci in 0..c {
                let i = base + ci * hw + p;
                out[i] = g.data()[i] - y.data()[i].exp() * gsum;
            }
        }
    }
    Tensor::new(y.shape(), out)
}

/// Backward of softmax given its output `s`: `s * (g - sum_c g s)`.
pub fn softmax_channels_backward<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = s.dims4()?;
    let hw = h * w;
    let mut out = vec![T::zero(); s.numel()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ci in 0..c {
                let i = base + ci * hw + p;
                dot += g.data()[i] * s.data()[i];
            }
            for ci in 0..c {
                let i = base + ci * hw + p;
                out[i] = s.data()[i] * (g.data()[i] - dot);
            }
        }
    }
    Tensor::new(s.shape(), out)
}

/// `y[n,c,h,w] = x[n,c,h,w] * scale[c] + shift[c]`.
pub fn channel_affine<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(AutogradError::Shape(format!("channel_affine: {} channels vs {} coefficients", c, scale.len())));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for v in &mut out[base..base + hw] {
                *v = *v * scale[ci] + shift[ci];
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Single-level orthonormal 2-D Haar analysis.
///
/// `[N, C, H, W] -> [N, 4C, H/2, W/2]`, subband-major: channels `0..C` hold LL,
/// then LH (horizontal detail), HL (vertical detail), HH (diagonal detail).
/// For a 2x2 block `[[a, b], [c, d]]`:
/// `LL = (a+b+c+d)/2`, `LH = (a-b+c-d)/2`, `HL = (a+b-c-d)/2`, `HH = (a-b-c+d)/2`.
pub fn haar_analysis<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(AutogradError::Shape(format!("haar needs even spatial size, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let half = T::from_f64(0.5);
    let sub = ho * wo;
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let plane = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let band = |s: usize| ((ni * 4 + s) * c + ci) * sub;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            for y in 0..ho {
                for xx in 0..wo {
                    let a = plane[2 * y * w + 2 * xx];
                    let b = plane[2 * y * w + 2 * xx + 1];
                    let cc = plane[(2 * y + 1) * w + 2 * xx];
                    let d = plane[(2 * y + 1) * w + 2 * xx + 1];
                    let o = y * wo + xx;
                    out[ll + o] = (a + b + cc + d) * half;
                    out[lh + o] = (a - b + cc - d) * half;
                    out[hl + o] = (a + b - cc - d) * half;
                    out[hh + o] = (a - b - cc + d) * half;
                }
            }
        }
    }
    Tensor::new(&[n, 4 * c, ho, wo], out)
}

/// Inverse (and adjoint) of [`haar_analysis`].
pub fn haar_synthesis<T: Real>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, ho, wo) = s.dims4()?;
    if c4 % 4 != 0 {
        return Err(AutogradError::Shape(format!("haar synthesis needs 4k channels, got {c4}")));
    }
    let c = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let half = T::from_f64(0.5);
    let sub = ho * wo;
    let src = s.data();
    let mut out = vec![T::zero(); s.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let band = |k: usize| ((ni * 4 + k) * c + ci) * sub;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            let plane = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let o = y * wo + xx;
                    let (p, q, r, t) = (src[ll + o], src[lh + o], src[hl + o], src[hh + o]);
                    plane[2 * y * w + 2 * xx] = (p + q + r + t) * half;
                    plane[2 * y * w + 2 * xx + 1] = (p - q + r - t) * half;
                    plane[(2 * y + 1) * w + 2 * xx] = (p + q - r - t) * half;
                    plane[(2 * y + 1) * w + 2 * xx + 1] = (p - q - r + t) * half;
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}
