use pdd_autograd::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::imaging::resample::{resize_plane, Interp};
use crate::imaging::{images_to_tensor, tensor_to_images, ImageTensor};
use crate::params::{Bound, ParamStore};
use crate::seeding::rng_for;
use crate::{PddError, Result};

const LRELU: f64 = 0.2;
const RESIDUAL_SCALE: f64 = 0.2;
/// Init gain of the convs inside residual branches and of the output conv.
const BRANCH_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub scale: usize,
    /// Trunk feature channels.
    pub channels: usize,
    /// Channels added by each dense layer.
    pub growth: usize,
    /// Number of residual dense blocks.
    pub blocks: usize,
    /// Add a bicubic upsampling of the input to the output.
    #[serde(default = "default_true")]
    pub bicubic_skip: bool,
}

fn default_true() -> bool {
    true
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { scale: 4, channels: 32, growth: 16, blocks: 4, bicubic_skip: true }
    }
}

impl GeneratorConfig {
    /// The 2-block, 16-channel network used for quick experiments.
    pub fn tiny() -> Self {
        Self { scale: 4, channels: 16, growth: 8, blocks: 2, bicubic_skip: true }
    }

    /// Sub-pixel shuffle factors realizing `scale`.
    fn shuffle_factors(&self) -> Result<Vec<usize>> {
        let mut s = self.scale;
        let mut out = Vec::new();
        while s % 2 == 0 {
            out.push(2);
            s /= 2;
        }
        while s % 3 == 0 {
            out.push(3);
            s /= 3;
        }
        if s != 1 || out.is_empty() {
            return Err(PddError::Config(format!("scale {} is not a product of 2s and 3s", self.scale)));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.growth == 0 || self.blocks == 0 {
            return Err(PddError::Config(format!("generator needs positive channels/growth/blocks: {self:?}")));
        }
        self.shuffle_factors().map(|_| ())
    }
}

/// Residual-in-residual dense-block style super-resolution network.
///
/// `conv_first → blocks (3-layer dense block, scaled residual) → conv_trunk (+ skip)
/// → [conv, pixel shuffle, LeakyReLU]* → conv_hr → conv_last`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, 0);
        let mut p = ParamStore::new();
        let (nf, gc) = (cfg.channels, cfg.growth);
        p.init_conv(&mut rng, "conv_first", 3, nf, 3, 1.0);
        for b in 0..cfg.blocks {
            p.init_conv(&mut rng, &format!("rdb{b}.conv1"), nf, gc, 3, BRANCH_GAIN);
            p.init_conv(&mut rng, &format!("rdb{b}.conv2"), nf + gc, gc, 3, BRANCH_GAIN);
            p.init_conv(&mut rng, &format!("rdb{b}.conv3"), nf + 2 * gc, nf, 3, BRANCH_GAIN);
        }
        p.init_conv(&mut rng, "conv_trunk", nf, nf, 3, BRANCH_GAIN);
        for (i, r) in cfg.shuffle_factors()?.into_iter().enumerate() {
            p.init_conv(&mut rng, &format!("up{i}"), nf, nf * r * r, 3, 1.0);
        }
        p.init_conv(&mut rng, "conv_hr", nf, nf, 3, 1.0);
        p.init_conv(&mut rng, "conv_last", nf, 3, 3, BRANCH_GAIN);
        Ok(Self { cfg: cfg.clone(), params: p })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// `[N, 3, h, w] → [N, 3, scale·h, scale·w]`, unclipped.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != 3 {
            return Err(PddError::InvalidShape(format!("generator input has {c} channels")));
        }
        let fea0 = bound.conv(g, "conv_first", x, 1, 1)?;
        let mut h = fea0;
        for b in 0..self.cfg.blocks {
            let c1 = bound.conv(g, &format!("rdb{b}.conv1"), h, 1, 1)?;
            let c1 = g.leaky_relu(c1, LRELU);
            let cat1 = g.concat_channels(&[h, c1])?;
            let c2 = bound.conv(g, &format!("rdb{b}.conv2"), cat1, 1, 1)?;
            let c2 = g.leaky_relu(c2, LRELU);
            let cat2 = g.concat_channels(&[h, c1, c2])?;
            let c3 = bound.conv(g, &format!("rdb{b}.conv3"), cat2, 1, 1)?;
            let c3 = g.scale(c3, RESIDUAL_SCALE);
            h = g.add(h, c3)?;
        }
        let trunk = bound.conv(g, "conv_trunk", h, 1, 1)?;
        let mut fea = g.add(fea0, trunk)?;
        for (i, r) in self.cfg.shuffle_factors()?.into_iter().enumerate() {
            let up = bound.conv(g, &format!("up{i}"), fea, 1, 1)?;
            let up = g.pixel_shuffle(up, r)?;
            fea = g.leaky_relu(up, LRELU);
        }
        let hr = bound.conv(g, "conv_hr", fea, 1, 1)?;
        let hr = g.leaky_relu(hr, LRELU);
        let out = bound.conv(g, "conv_last", hr, 1, 1)?;
        if !self.cfg.bicubic_skip {
            return Ok(out);
        }
        // The skip is computed from the input's value, so it carries no gradient to `x`.
        let skip = g.constant(bicubic_upsample(g.value(x), self.cfg.scale)?);
        Ok(g.add(out, skip)?)
    }

    /// Runs the network on a batch tensor without recording gradients.
    pub fn predict_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }

    /// Super-resolves one image; the output is clipped into `[0, 1]`.
    pub fn predict(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        let x = images_to_tensor::<f32>(std::slice::from_ref(lr))?;
        let y = self.predict_tensor(&x)?;
        Ok(tensor_to_images(&y)?.remove(0))
    }
}

/// Bicubic upsampling of every plane of an NCHW tensor by an integer factor.
pub fn bicubic_upsample<T: Real>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        let p: Vec<f64> = plane.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        out.extend(resize_plane(&p, h, w, oh, ow, Interp::Bicubic).into_iter().map(T::from_f64));
    }
    Ok(Tensor::new(&[n, c, oh, ow], out)?)
}
