//! Named `f32` parameter storage and its binding into an autograd graph.

use std::collections::BTreeMap;

use pdd_autograd::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::Archive;
use crate::{PddError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| PddError::InvalidState(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors.get_mut(name).ok_or_else(|| PddError::InvalidState(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// Adds every tensor to `g` (cast to `T`), as trainable leaves or constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars: BTreeMap<String, Var> =
            self.tensors.iter().map(|(k, t)| (k.clone(), g.leaf(t.cast(), trainable))).collect();
        Bound { leaves: vars.clone(), vars }
    }

    /// Kaiming-normal conv weight `[out, in, k, k]` (times `gain`) and zero bias.
    pub fn init_conv(&mut self, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, k: usize, gain: f64) {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let w = (0..c_out * c_in * k * k).map(|_| normal.sample(rng) as f32).collect();
        self.insert(format!("{name}.weight"), Tensor::new(&[c_out, c_in, k, k], w).expect("shape matches"));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
    }

    pub fn write_into(&self, archive: &mut Archive, prefix: &str) {
        for (k, t) in &self.tensors {
            archive.insert(format!("{prefix}{k}"), t.shape(), t.data().to_vec());
        }
    }

    /// Overwrites every parameter from `archive`, requiring identical shapes.
    pub fn read_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for (k, t) in self.tensors.iter_mut() {
            let src = archive.get(&format!("{prefix}{k}"))?;
            if src.shape != t.shape() {
                return Err(PddError::Data(format!(
                    "parameter `{prefix}{k}` has shape {:?}, model expects {:?}",
                    src.shape,
                    t.shape()
                )));
            }
            *t = Tensor::new(&src.shape, src.data.clone())?;
        }
        Ok(())
    }
}

/// Graph handles of a bound [`ParamStore`].
///
/// `vars` are what the forward pass uses; they start out as the leaves but may be
/// replaced by reparameterized nodes (e.g. spectrally normalized weights).
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    leaves: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| PddError::InvalidState(format!("parameter `{name}` not bound")))
    }

    /// The parameter leaves, for collecting gradients.
    pub fn leaves(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.leaves.iter()
    }

    pub(crate) fn replace(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// `conv(x)` with the `{name}.weight` / `{name}.bias` pair.
    pub fn conv<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        Ok(g.conv2d(x, w, Some(b), stride, pad)?)
    }
}
