//! Frozen VGG-style feature extraction, Gram matrices and pooled feature statistics.

use nalgebra::{DMatrix, DVector};
use pdd_autograd::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::imaging::{images_to_tensor, ImageTensor};
use crate::params::{Bound, ParamStore};
use crate::seeding::rng_for;
use crate::{PddError, Result};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const VGG19_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];

/// Which frozen backbone to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    /// Small randomly initialized stack: 4 blocks of 2 convs, 16/32/64/64 channels.
    Random { seed: u64 },
    /// VGG-19 weights from a safetensors file using torchvision's `features.{idx}` names.
    Vgg19 { path: std::path::PathBuf },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Random { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Tap names `block{i}_conv{j}` (1-based); empty means the backbone's default.
    #[serde(default)]
    pub taps: Vec<String>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), taps: Vec::new() }
    }
}

/// A tap location: zero-based block and conv indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct TapPos {
    block: usize,
    conv: usize,
}

fn parse_tap(name: &str) -> Result<TapPos> {
    let err = || PddError::Config(format!("tap `{name}` is not of the form block{{i}}_conv{{j}}"));
    let rest = name.strip_prefix("block").ok_or_else(err)?;
    let (b, c) = rest.split_once("_conv").ok_or_else(err)?;
    let block: usize = b.parse().map_err(|_| err())?;
    let conv: usize = c.parse().map_err(|_| err())?;
    if block == 0 || conv == 0 {
        return Err(err());
    }
    Ok(TapPos { block: block - 1, conv: conv - 1 })
}

/// A frozen convolutional backbone with named taps taken before the activation.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    weights: ParamStore,
    /// `(conv count, channels)` per block.
    blocks: Vec<(usize, usize)>,
    taps: Vec<String>,
    positions: Vec<TapPos>,
    mean: [f64; 3],
    std: [f64; 3],
}

impl FeatureExtractor {
    fn from_parts(weights: ParamStore, blocks: Vec<(usize, usize)>, taps: Vec<String>, mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if taps.is_empty() {
            return Err(PddError::Config("feature extractor needs at least one tap".into()));
        }
        let positions = taps.iter().map(|t| parse_tap(t)).collect::<Result<Vec<_>>>()?;
        for (t, p) in taps.iter().zip(&positions) {
            if p.block >= blocks.len() || p.conv >= blocks[p.block].0 {
                return Err(PddError::Config(format!("tap `{t}` does not exist in this backbone")));
            }
        }
        Ok(Self { weights, blocks, taps, positions, mean, std })
    }

    /// The randomly initialized stack with default taps (last conv of blocks 2, 3 and 4).
    pub fn random(seed: u64) -> Self {
        let blocks = vec![(2, 16), (2, 32), (2, 64), (2, 64)];
        let mut rng = rng_for(seed, 0);
        let mut weights = ParamStore::new();
        let mut c_in = 3;
        for (b, &(convs, ch)) in blocks.iter().enumerate() {
            for j in 0..convs {
                weights.init_conv(&mut rng, &conv_name(b, j), c_in, ch, 3, 1.0);
                c_in = ch;
            }
        }
        let taps = ["block2_conv2", "block3_conv2", "block4_conv2"].map(String::from).to_vec();
        Self::from_parts(weights, blocks, taps, [0.0; 3], [1.0; 3]).expect("default taps exist")
    }

    /// VGG-19 (conv part) from torchvision-named weights, with ImageNet normalization.
    /// Default taps are the last convs of blocks 2-4.
    pub fn vgg19(archive: &Archive) -> Result<Self> {
        let mut weights = ParamStore::new();
        let mut idx = 0;
        for (b, &(convs, _)) in VGG19_BLOCKS.iter().enumerate() {
            for j in 0..convs {
                for part in ["weight", "bias"] {
                    let src = archive.get(&format!("features.{idx}.{part}"))?;
                    weights.insert(format!("{}.{part}", conv_name(b, j)), Tensor::new(&src.shape, src.data.clone())?);
                }
                idx += 2; // conv, relu
            }
            idx += 1; // max pool
        }
        let taps = ["block2_conv2", "block3_conv4", "block4_conv4"].map(String::from).to_vec();
        Self::from_parts(weights, VGG19_BLOCKS.to_vec(), taps, IMAGENET_MEAN, IMAGENET_STD)
    }

    pub fn from_config(cfg: &FeatureConfig) -> Result<Self> {
        let ex = match &cfg.backbone {
            BackboneConfig::Random { seed } => Self::random(*seed),
            BackboneConfig::Vgg19 { path } => {
                let bytes = std::fs::read(path).map_err(|source| PddError::Io { path: path.clone(), source })?;
                Self::vgg19(&Archive::from_bytes(&bytes)?)?
            }
        };
        if cfg.taps.is_empty() {
            Ok(ex)
        } else {
            ex.with_taps(&cfg.taps)
        }
    }

    pub fn with_taps<S: AsRef<str>>(self, taps: &[S]) -> Result<Self> {
        let taps = taps.iter().map(|s| s.as_ref().to_string()).collect();
        Self::from_parts(self.weights, self.blocks, taps, self.mean, self.std)
    }

    pub fn taps(&self) -> &[String] {
        &self.taps
    }

    pub fn weights(&self) -> &ParamStore {
        &self.weights
    }

    /// Channel count of every tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.positions.iter().map(|p| self.blocks[p.block].1).collect()
    }

    /// Smallest input side for which every tap is non-empty.
    pub fn min_input_size(&self) -> usize {
        let deepest = self.positions.iter().map(|p| p.block).max().unwrap_or(0);
        1 << deepest
    }

    /// Adds the frozen weights to `g` as constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Bound {
        self.weights.bind(g, false)
    }

    /// Tap outputs for an NCHW RGB batch, in tap order.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let need = self.min_input_size();
        if h < need || w < need {
            return Err(PddError::InvalidShape(format!("input {h}x{w} smaller than {need}x{need} needed by the taps")));
        }
        let deepest = *self.positions.iter().max().expect("taps are non-empty");
        let mut out: Vec<Option<Var>> = vec![None; self.taps.len()];
        let mut cur = if self.mean == [0.0; 3] && self.std == [1.0; 3] {
            x
        } else {
            let scale = self.std.map(|s| 1.0 / s);
            let shift = [0, 1, 2].map(|c| -self.mean[c] / self.std[c]);
            g.channel_affine(x, &scale, &shift)?
        };
        'blocks: for (b, &(convs, _)) in self.blocks.iter().enumerate() {
            if b > 0 {
                cur = g.max_pool2(cur)?;
            }
            for j in 0..convs {
                let pre = bound.conv(g, &conv_name(b, j), cur, 1, 1)?;
                for (slot, p) in out.iter_mut().zip(&self.positions) {
                    if *p == (TapPos { block: b, conv: j }) {
                        *slot = Some(pre);
                    }
                }
                if (TapPos { block: b, conv: j }) == deepest {
                    break 'blocks;
                }
                cur = g.relu(pre);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every tap is reached before the deepest one")).collect())
    }

    /// Features of a single image (double precision).
    pub fn extract(&self, img: &ImageTensor) -> Result<FeaturePack> {
        if img.channels() != 3 {
            return Err(PddError::InvalidInput("feature extraction needs an RGB image".into()));
        }
        let mut g = Graph::<f64>::new();
        let bound = self.bind(&mut g);
        let x = g.constant(images_to_tensor(std::slice::from_ref(img))?);
        let vars = self.forward(&mut g, &bound, x)?;
        let maps = vars
            .into_iter()
            .zip(&self.taps)
            .map(|(v, name)| {
                let t = g.value(v);
                let (_, c, h, w) = t.dims4()?;
                Ok((name.clone(), t.clone().reshape(&[c, h, w])?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePack { maps })
    }
}

fn conv_name(block: usize, conv: usize) -> String {
    format!("block{}_conv{}", block + 1, conv + 1)
}

/// Per-tap `c x h x w` feature maps, in tap order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    pub maps: Vec<(String, Tensor<f64>)>,
}

impl FeaturePack {
    pub fn get(&self, tap: &str) -> Result<&Tensor<f64>> {
        self.maps
            .iter()
            .find(|(n, _)| n == tap)
            .map(|(_, t)| t)
            .ok_or_else(|| PddError::InvalidInput(format!("feature pack has no tap `{tap}`")))
    }

    pub fn all_finite(&self) -> bool {
        self.maps.iter().all(|(_, t)| t.all_finite())
    }
}

/// Symmetric `c x c` matrix of channel correlations, normalized by `h w`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub c: usize,
    pub data: Vec<f64>,
    pub normalizer: usize,
}

impl GramMatrix {
    pub fn at(&self, p: usize, q: usize) -> f64 {
        self.data[p * self.c + q]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.c, self.c, &self.data)
    }
}

/// Gram matrix of a `c x h x w` map.
pub fn gram(f: &Tensor<f64>) -> Result<GramMatrix> {
    let &[c, h, w] = f.shape() else {
        return Err(PddError::InvalidShape(format!("gram needs a c x h x w map, got {:?}", f.shape())));
    };
    if !f.all_finite() {
        return Err(PddError::InvalidInput("non-finite feature map".into()));
    }
    let g = pdd_autograd::ops::matrix::gram(&f.clone().reshape(&[1, c, h, w])?)?;
    Ok(GramMatrix { c, data: g.into_data(), normalizer: h * w })
}

/// Mean vector and covariance of a set of descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance of the rows of `samples`.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(PddError::InvalidInput(format!("need at least 2 samples, got {}", samples.len())));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(PddError::InvalidInput("descriptors have different lengths".into()));
        }
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let x = DVector::from_column_slice(s) - &mean;
            cov += &x * x.transpose();
        }
        cov /= n - 1.0;
        Ok(Self { mean, cov, count: samples.len() })
    }
}

/// Spatial mean followed by spatial (population) std of every channel: length `2c`.
pub fn pooled_descriptor(f: &Tensor<f64>) -> Result<Vec<f64>> {
    let &[c, h, w] = f.shape() else {
        return Err(PddError::InvalidShape(format!("descriptor needs a c x h x w map, got {:?}", f.shape())));
    };
    let hw = (h * w) as f64;
    let mut means = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for plane in f.data().chunks_exact(h * w) {
        let m = plane.iter().sum::<f64>() / hw;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw;
        means.push(m);
        stds.push(var.sqrt());
    }
    means.extend(stds);
    Ok(means)
}

/// Gaussian fit of the pooled descriptors of `tap` over `images`.
pub fn fit_feature_gaussian(images: &[ImageTensor], ex: &FeatureExtractor, tap: &str) -> Result<GaussianStats> {
    if images.len() < 2 {
        return Err(PddError::InvalidInput(format!("need at least 2 images, got {}", images.len())));
    }
    if !ex.taps().iter().any(|t| t == tap) {
        return Err(PddError::InvalidInput(format!("extractor has no tap `{tap}`")));
    }
    let descriptors = images
        .iter()
        .map(|img| pooled_descriptor(ex.extract(img)?.get(tap)?))
        .collect::<Result<Vec<_>>>()?;
    GaussianStats::fit(&descriptors)
}
