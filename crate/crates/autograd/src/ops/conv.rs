//! 2-D convolution via im2col + GEMM.

use crate::real::matmul;
use crate::{AutogradError, Real, Result, Tensor};

/// Output extent of a convolution along one axis, `None` if the kernel does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        let (o, wc, kh, kw) = weight.dims4()?;
        if wc != c || kh != kw {
            return Err(AutogradError::Shape(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                x.shape(),
                weight.shape()
            )));
        }
        let (ho, wo) = match (conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(AutogradError::Shape(format!(
                    "conv2d: kernel {kh} with pad {pad} does not fit {h}x{w}"
                )))
            }
        };
        Ok(Self { n, c, h, w, o, k: kh, ho, wo, stride, pad })
    }

    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let l = g.cols_len();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * l..(row + 1) * l];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let l = g.cols_len();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * l..(row + 1) * l];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.o {
            return Err(AutogradError::Shape(format!(
                "conv2d: bias of {} elements for {} output channels",
                b.numel(),
                g.o
            )));
        }
    }
    let (kk, l) = (g.cols_rows(), g.cols_len());
    let in_per = g.c * g.h * g.w;
    let out_per = g.o * l;
    let mut out = vec![T::zero(); g.n * out_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * l] };
    for n in 0..g.n {
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        let yn = &mut out[n * out_per..(n + 1) * out_per];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        matmul(weight.data(), false, src, false, yn, g.o, kk, l, T::zero());
        if let Some(b) = bias {
            for (oc, row) in yn.chunks_mut(l).enumerate() {
                let bv = b.data()[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[g.n, g.o, g.ho, g.wo], out)
}

pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<Conv2dGrads<T>> {
    let g = Geometry::new(x, weight, stride, pad)?;
    let (kk, l) = (g.cols_rows(), g.cols_len());
    let in_per = g.c * g.h * g.w;
    let out_per = g.o * l;
    let [want_x, want_w, want_b] = want;

    let mut dx = want_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = want_w.then(|| vec![T::zero(); weight.numel()]);
    let mut db = want_b.then(|| vec![T::zero(); g.o]);
    let mut cols = vec![T::zero(); if want_w && !g.is_pointwise() { kk * l } else { 0 }];
    let mut dcols = vec![T::zero(); if want_x && !g.is_pointwise() { kk * l } else { 0 }];

    for n in 0..g.n {
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        let gyn = &grad_out.data()[n * out_per..(n + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, &g, &mut cols);
                &cols
            };
            matmul(gyn, false, src, true, dw, g.o, l, kk, T::one());
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                matmul(weight.data(), true, gyn, false, dxn, kk, g.o, l, T::one());
            } else {
                matmul(weight.data(), true, gyn, false, &mut dcols, kk, g.o, l, T::zero());
                col2im(&dcols, &g, dxn);
            }
        }
        if let Some(db) = db.as_mut() {
            for (oc, row) in gyn.chunks(l).enumerate() {
                db[oc] += row.iter().copied().sum::<T>();
            }
        }
    }
    Ok(Conv2dGrads {
        input: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(&[g.o], d)).transpose()?,
    })
}
