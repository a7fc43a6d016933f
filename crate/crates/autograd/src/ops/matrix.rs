//! Gram matrices, per-sample norms and spectral weight normalization.

use crate::real::matmul;
use crate::{AutogradError, Real, Result, Tensor};

/// `[N, C, H, W] -> [N, C, C]` with `G[p, q] = (1 / (H W)) sum_{m,n} f[p,m,n] f[q,m,n]`.
pub fn gram<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let mut out = vec![T::zero(); n * c * c];
    for ni in 0..n {
        let f = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        let g = &mut out[ni * c * c..(ni + 1) * c * c];
        matmul(f, false, f, true, g, c, hw, c, T::zero());
        // symmetrize exactly; GEMM blocking can round the two triangles differently
        for p in 0..c {
            for q in p + 1..c {
                let v = g[p * c + q];
                g[q * c + p] = v;
            }
        }
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(&[n, c, c], out)
}

/// Gradient of [`gram`]: `dF = (dG + dG^T) F / (H W)`.
pub fn gram_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let mut out = vec![T::zero(); x.numel()];
    let mut sym = vec![T::zero(); c * c];
    for ni in 0..n {
        let gg = &grad.data()[ni * c * c..(ni + 1) * c * c];
        for p in 0..c {
            for q in 0..c {
                sym[p * c + q] = (gg[p * c + q] + gg[q * c + p]) * inv;
            }
        }
        let f = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        matmul(&sym, false, f, false, &mut out[ni * c * hw..(ni + 1) * c * hw], c, c, hw, T::zero());
    }
    Tensor::new(x.shape(), out)
}

/// Euclidean (Frobenius) norm of every batch item: `[N, ...] -> [N]`.
pub fn norm_per_sample<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().first().ok_or_else(|| AutogradError::Shape("norm of a scalar".into()))?;
    let per = if n == 0 { 0 } else { x.numel() / n };
    let out = (0..n)
        .map(|i| x.data()[i * per..(i + 1) * per].iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    Tensor::new(&[n], out)
}

/// Gradient of [`norm_per_sample`]; the subgradient at a zero norm is taken as zero.
pub fn norm_per_sample_backward<T: Real>(x: &Tensor<T>, norms: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let n = norms.numel();
    let per = if n == 0 { 0 } else { x.numel() / n };
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let nv = norms.data()[i];
        if nv > T::zero() {
            let k = grad.data()[i] / nv;
            for (o, &v) in out.data_mut()[i * per..(i + 1) * per].iter_mut().zip(&x.data()[i * per..(i + 1) * per]) {
                *o = k * v;
            }
        }
    }
    out
}

/// `W / sigma` where `sigma = u^T W v` with `W` viewed as `rows x (numel / rows)`.
pub fn spectral_normalize<T: Real>(w: &Tensor<T>, u: &[T], v: &[T]) -> Result<(Tensor<T>, T)> {
    let rows = w.shape()[0];
    let cols = w.numel() / rows.max(1);
    if u.len() != rows || v.len() != cols {
        return Err(AutogradError::Shape(format!(
            "spectral norm vectors {}x{} for weight {:?}",
            u.len(),
            v.len(),
            w.shape()
        )));
    }
    let sigma = spectral_sigma(w.data(), u, v);
    if !(sigma > T::zero()) {
        return Err(AutogradError::Numeric(format!("spectral norm sigma = {sigma}")));
    }
    Ok((w.map(|x| x / sigma), sigma))
}

pub(crate) fn spectral_sigma<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

/// Gradient of [`spectral_normalize`] with `u`, `v` held fixed:
/// `dW = g / sigma - (<g, W> / sigma^2) u v^T`.
pub fn spectral_normalize_backward<T: Real>(w: &Tensor<T>, u: &[T], v: &[T], sigma: T, g: &Tensor<T>) -> Tensor<T> {
    let cols = v.len();
    let inner: T = g.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
    let k = inner / (sigma * sigma);
    let mut out = g.map(|x| x / sigma);
    for (r, &ur) in u.iter().enumerate() {
        for (o, &vc) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(v) {
            *o -= k * ur * vc;
        }
    }
    out
}

/// One power-iteration step refining `(u, v)` towards the top singular pair of `W`.
pub fn power_iteration<T: Real>(w: &[T], u: &mut [T], v: &mut [T]) {
    let (rows, cols) = (u.len(), v.len());
    let eps = T::from_f64(1e-12);
    // v = W^T u / ||W^T u||
    for (c, vc) in v.iter_mut().enumerate() {
        *vc = (0..rows).map(|r| w[r * cols + c] * u[r]).sum();
    }
    let nv = v.iter().map(|&x| x * x).sum::<T>().sqrt() + eps;
    v.iter_mut().for_each(|x| *x = *x / nv);
    // u = W v / ||W v||
    for (r, ur) in u.iter_mut().enumerate() {
        *ur = w[r * cols..(r + 1) * cols].iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
    }
    let nu = u.iter().map(|&x| x * x).sum::<T>().sqrt() + eps;
    u.iter_mut().for_each(|x| *x = *x / nu);
}
