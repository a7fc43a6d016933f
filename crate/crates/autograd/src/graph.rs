//! Define-by-run tape. Every op appends a node holding its output value; `backward`
//! walks the tape in reverse and accumulates gradients for nodes that require them.

use crate::ops::{channel, conv, layout, matrix};
use crate::{AutogradError, Real, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    PixelShuffle(Var, usize),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    MaxPool2(Var, Vec<u32>),
    ChannelAffine(Var, Vec<T>),
    LogSoftmax(Var),
    Softmax(Var),
    Haar(Var),
    Gram(Var),
    NormPerSample(Var),
    SpectralNorm { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutogradError::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let slope = T::from_f64(slope);
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = layout::pixel_shuffle(self.value(x), r)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::PixelShuffle(x, r), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = layout::concat_channels(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = layout::slice_channels(self.value(x), start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceChannels(x, start), rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = layout::max_pool2(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2(x, arg), rg))
    }

    /// Per-channel `x * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let scale: Vec<T> = scale.iter().map(|&s| T::from_f64(s)).collect();
        let shift: Vec<T> = shift.iter().map(|&s| T::from_f64(s)).collect();
        let out = channel::channel_affine(self.value(x), &scale, &shift)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelAffine(x, scale), rg))
    }

    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = channel::log_softmax_channels(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = channel::log_softmax_channels(self.value(x))?.map(|v| v.exp());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Single-level orthonormal Haar analysis, see [`channel::haar_analysis`].
    pub fn haar(&mut self, x: Var) -> Result<Var> {
        let out = channel::haar_analysis(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Haar(x), rg))
    }

    /// Spatially normalized Gram matrix per batch item, `[N, C, H, W] -> [N, C, C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let out = matrix::gram(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gram(x), rg))
    }

    /// Frobenius norm of each batch item, `[N, ...] -> [N]`.
    pub fn norm_per_sample(&mut self, x: Var) -> Result<Var> {
        let out = matrix::norm_per_sample(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormPerSample(x), rg))
    }

    /// `W / (u^T W v)` with the power-iteration vectors treated as constants.
    pub fn spectral_normalize(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let u: Vec<T> = u.iter().map(|&x| T::from_f64(x)).collect();
        let v: Vec<T> = v.iter().map(|&x| T::from_f64(x)).collect();
        let (out, sigma) = matrix::spectral_normalize(self.value(w), &u, &v)?;
        let rg = self.rg(w);
        Ok(self.push(out, Op::SpectralNorm { w, u, v, sigma }, rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(AutogradError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            // keep our own gradient available to callers
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Result<Tensor<T>> {
            Tensor::new(a.shape(), g.data().iter().zip(a.data()).map(|(&gv, &av)| f(gv, av)).collect())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = zip(self.value(*b), &|gv, bv| gv * bv)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = zip(self.value(*a), &|gv, av| gv * av)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.value(*a).shape())?;
                self.accumulate(grads, *a, shaped);
            }
            Op::Abs(a) => {
                let ga = zip(self.value(*a), &|gv, av| {
                    if av > T::zero() {
                        gv
                    } else if av < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                let ga = zip(self.value(*a), &|gv, av| two * av * gv)?;
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let ga = zip(self.value(*a), &|gv, av| if av > T::zero() { gv } else { gv * slope })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip(self.value(*a), &|gv, av| gv / (T::one() + (-av).exp()))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1);
                let gv = g.item() / T::from_f64(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let want = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let cg = conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, want)?;
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    let gb = gb.reshape(self.value(*b).shape())?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::PixelShuffle(x, r) => {
                let gx = layout::pixel_unshuffle(g, *r)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.rg(p) {
                        let gp = layout::slice_channels(g, start, c)?;
                        self.accumulate(grads, p, gp);
                    }
                    start += c;
                }
            }
            Op::SliceChannels(x, start) => {
                let gx = layout::unslice_channels(g, self.value(*x).shape(), *start)?;
                self.accumulate(grads, *x, gx);
            }
            Op::MaxPool2(x, arg) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[i as usize] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelAffine(x, scale) => {
                let zeros = vec![T::zero(); scale.len()];
                let gx = channel::channel_affine(g, scale, &zeros)?;
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let gx = channel::log_softmax_channels_backward(&node.value, g)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let gx = channel::softmax_channels_backward(&node.value, g)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Haar(x) => {
                let gx = channel::haar_synthesis(g)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Gram(x) => {
                let gx = matrix::gram_backward(self.value(*x), g)?;
                self.accumulate(grads, *x, gx);
            }
            Op::NormPerSample(x) => {
                let gx = matrix::norm_per_sample_backward(self.value(*x), &node.value, g);
                self.accumulate(grads, *x, gx);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let gw = matrix::spectral_normalize_backward(self.value(*w), u, v, *sigma, g);
                self.accumulate(grads, *w, gw);
            }
        }
        Ok(())
    }
}
