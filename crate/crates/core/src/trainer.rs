//! Optimization loop: batch composition, Adam with a step schedule, alternating
//! generator/discriminator updates, mode dispatch, logging and checkpointing.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pdd_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::degradation::{list_pngs, Manifest};
use crate::error::IoContext;
use crate::evalkit::{evaluate_model, BicubicUpsampler, EvalReport};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::imaging::{images_to_tensor, paired_crop_with, random_crop_with, read_png, ImageTensor};
use crate::losses::{LossCtx, LossReport, LossWeights, QuadVars};
use crate::models::{
    ema_update, Checkpoint, Critic, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelPair, RngState, TrainMode,
};
use crate::params::{Bound, ParamStore};
use crate::seeding::{derive, rng_for};
use crate::{PddError, Result};

pub const SCHEMA_VERSION: u32 = 1;

const STREAM_DATA: u64 = 1;
const STREAM_INIT_S: u64 = 2;
const STREAM_INIT_G: u64 = 3;
const STREAM_INIT_D: u64 = 4;
/// Accepted steps needed before spike detection starts.
const SPIKE_WARMUP: usize = 10;

/// Where the training data lives.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of labeled `(lr, hr)` pairs.
    pub labeled: PathBuf,
    /// Directory of unlabeled LR PNGs, or a manifest whose HR side is ignored.
    pub unlabeled: PathBuf,
    /// Manifest of held-out pairs for the end-of-run evaluation.
    #[serde(default)]
    pub val: Option<PathBuf>,
}

/// Checkpoints the networks start from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Checkpoint whose specialist initializes `M_S` (static and naive modes).
    #[serde(default)]
    pub specialist: Option<PathBuf>,
    /// Checkpoint whose specialist initializes `M_G` (and `M_S` in ema / single_fixed modes).
    #[serde(default)]
    pub generalist: Option<PathBuf>,
    /// Continue a run from one of its checkpoints.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub mode: TrainMode,
    /// Half labeled, half unlabeled.
    pub batch_size: usize,
    /// LR patch side.
    pub lr_size: usize,
    pub scale: usize,
    pub lr0: f64,
    /// First step that uses `lr0 / 2`.
    pub halve_at: u64,
    pub total_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
    pub weights: LossWeights,
    /// Architecture of freshly initialized generators.
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
    pub seed: u64,
    pub disc_updates_per_step: usize,
    /// Add crops of the labeled HR pool as extra discriminator reals.
    pub unpaired_real: bool,
    /// Skip a step whose total exceeds this multiple of the recent median.
    pub spike_factor: f64,
    /// Number of accepted totals the median is taken over.
    pub spike_window: usize,
    /// Periodic checkpoint interval; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: TrainMode::PddEma,
            batch_size: 8,
            lr_size: 48,
            scale: 4,
            lr0: 1e-4,
            halve_at: 2500,
            total_iters: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ema_decay: 0.999,
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            features: FeatureConfig::default(),
            seed: 0,
            disc_updates_per_step: 1,
            unpaired_real: true,
            spike_factor: 100.0,
            spike_window: 100,
            checkpoint_every: 0,
            data: DataConfig::default(),
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The full-size protocol: batch 16, 48x48 patches, halving at 25K, 50K (static) or 100K steps.
    pub fn full_scale(mode: TrainMode) -> Self {
        let total_iters = if mode == TrainMode::PddStatic { 50_000 } else { 100_000 };
        Self { mode, batch_size: 16, halve_at: 25_000, total_iters, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PddError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size {} must be even and at least 2", self.batch_size));
        }
        if self.halve_at >= self.total_iters {
            return bad(format!("halve_at {} must be below total_iters {}", self.halve_at, self.total_iters));
        }
        if self.lr_size == 0 || self.scale == 0 {
            return bad("lr_size and scale must be positive".into());
        }
        if self.generator.scale != self.scale {
            return bad(format!("generator scale {} differs from scale {}", self.generator.scale, self.scale));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("invalid optimizer settings".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1]", self.ema_decay));
        }
        if self.disc_updates_per_step == 0 {
            return bad("disc_updates_per_step must be at least 1".into());
        }
        if !(self.spike_factor > 1.0) || self.spike_window == 0 {
            return bad("spike_factor must exceed 1 and spike_window be positive".into());
        }
        self.generator.validate()?;
        self.weights.validate(self.mode.is_pdd())
    }
}

/// `lr0` before `halve_at`, `lr0 / 2` from then on.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.halve_at {
        cfg.lr0
    } else {
        cfg.lr0 / 2.0
    }
}

/// In-memory training data.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<(ImageTensor, ImageTensor)>,
    pub unlabeled: Vec<ImageTensor>,
    /// Held-out `(lr, hr, id)` triples for the end-of-run evaluation.
    pub val: Vec<(ImageTensor, ImageTensor, String)>,
}

/// LR images from a directory of PNGs, or the LR side of a manifest.
pub fn load_unlabeled(path: &Path) -> Result<Vec<ImageTensor>> {
    if path.is_dir() {
        return list_pngs(path)?.iter().map(|p| read_png(p)).collect();
    }
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.entries.iter().map(|e| read_png(&base.join(&e.lr_path))).collect()
}

impl TrainData {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let labeled = Manifest::load(&cfg.labeled)?.load_pairs(cfg.labeled.parent().unwrap_or(Path::new(".")))?;
        let unlabeled = load_unlabeled(&cfg.unlabeled)?;
        let val = match &cfg.val {
            Some(p) => crate::evalkit::load_manifest_triples(p)?,
            None => Vec::new(),
        };
        Ok(Self { labeled, unlabeled, val })
    }
}

/// One training batch as NCHW `f32` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub x_l: Tensor<f32>,
    pub y_l: Tensor<f32>,
    pub x_u: Tensor<f32>,
    /// Unpaired clean HR crops, extra discriminator reals.
    pub hr_pool: Option<Tensor<f32>>,
    /// `(image index, lr origin)` of every labeled patch.
    pub labeled_ids: Vec<(usize, (usize, usize))>,
    pub unlabeled_ids: Vec<usize>,
}

impl Batch {
    pub fn labeled_count(&self) -> usize {
        self.x_l.shape()[0]
    }

    pub fn unlabeled_count(&self) -> usize {
        self.x_u.shape()[0]
    }

    fn describe(&self, data: &TrainData) -> String {
        let name = |img: &ImageTensor, i: usize| img.meta().map(String::from).unwrap_or_else(|| format!("#{i}"));
        let l: Vec<String> = self.labeled_ids.iter().map(|&(i, o)| format!("{}@{o:?}", name(&data.labeled[i].0, i))).collect();
        let u: Vec<String> = self.unlabeled_ids.iter().map(|&i| name(&data.unlabeled[i], i)).collect();
        format!("labeled [{}], unlabeled [{}]", l.join(", "), u.join(", "))
    }
}

/// Draws `batch_size / 2` labeled pairs and `batch_size / 2` unlabeled patches;
/// a pure function of `(cfg.seed, step)`.
pub fn make_batch(data: &TrainData, cfg: &TrainConfig, step: u64) -> Result<Batch> {
    if data.labeled.is_empty() || data.unlabeled.is_empty() {
        return Err(PddError::Data(format!(
            "need labeled and unlabeled images, have {} and {}",
            data.labeled.len(),
            data.unlabeled.len()
        )));
    }
    if cfg.batch_size < 2 || cfg.batch_size % 2 != 0 {
        return Err(PddError::Config(format!("batch_size {} must be even and at least 2", cfg.batch_size)));
    }
    let half = cfg.batch_size / 2;
    let mut rng = rng_for(derive(cfg.seed, step), STREAM_DATA);
    let (mut xl, mut yl, mut xu, mut pool) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut labeled_ids, mut unlabeled_ids) = (Vec::new(), Vec::new());
    use rand::Rng;
    for _ in 0..half {
        let i = rng.random_range(0..data.labeled.len());
        let (lr, hr) = &data.labeled[i];
        let p = paired_crop_with(lr, hr, cfg.lr_size, cfg.scale, &mut rng)?;
        labeled_ids.push((i, p.lr_origin));
        xl.push(p.lr);
        yl.push(p.hr);
    }
    for _ in 0..half {
        let i = rng.random_range(0..data.unlabeled.len());
        xu.push(random_crop_with(&data.unlabeled[i], cfg.lr_size, &mut rng)?);
        unlabeled_ids.push(i);
    }
    if cfg.unpaired_real {
        for _ in 0..half {
            let i = rng.random_range(0..data.labeled.len());
            pool.push(random_crop_with(&data.labeled[i].1, cfg.lr_size * cfg.scale, &mut rng)?);
        }
    }
    Ok(Batch {
        step,
        x_l: images_to_tensor(&xl)?,
        y_l: images_to_tensor(&yl)?,
        x_u: images_to_tensor(&xu)?,
        hr_pool: if pool.is_empty() { None } else { Some(images_to_tensor(&pool)?) },
        labeled_ids,
        unlabeled_ids,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (k, t) in params.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self { m: zeros(), v: zeros(), t: 0, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            if g.shape() != p.shape() {
                return Err(PddError::InvalidState(format!("gradient shape of `{name}`")));
            }
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    fn write_into(&self, a: &mut Archive, prefix: &str) {
        self.m.write_into(a, &format!("{prefix}m."));
        self.v.write_into(a, &format!("{prefix}v."));
    }

    fn read_from(&mut self, a: &Archive, prefix: &str, t: u64) -> Result<()> {
        self.m.read_from(a, &format!("{prefix}m."))?;
        self.v.read_from(a, &format!("{prefix}v."))?;
        self.t = t;
        Ok(())
    }
}

fn collect_grads(grads: &pdd_autograd::Gradients<f32>, bound: &Bound) -> BTreeMap<String, Tensor<f32>> {
    bound.leaves().filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone()))).collect()
}

/// Result of one [`Trainer::train_step`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub skipped: bool,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct TrainerState {
    adam_g_t: u64,
    adam_d_t: u64,
    history: Vec<f64>,
}

/// Models, optimizers and bookkeeping of a run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub pair: ModelPair,
    pub extractor: FeatureExtractor,
    opt_g: Adam,
    opt_d: Adam,
    /// Recently accepted totals, for spike detection.
    history: VecDeque<f64>,
    /// Largest generalist gradient seen by the probe (when enabled).
    probe: Option<f64>,
}

impl Trainer {
    /// Fresh networks from `cfg` (no checkpoints involved).
    pub fn fresh(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let s = Generator::new(&cfg.generator, derive(cfg.seed, STREAM_INIT_S))?;
        let g = if cfg.mode == TrainMode::PddEma || cfg.mode == TrainMode::SingleFixed {
            s.clone()
        } else {
            Generator::new(&cfg.generator, derive(cfg.seed, STREAM_INIT_G))?
        };
        let d = Discriminator::new(&cfg.discriminator, derive(cfg.seed, STREAM_INIT_D))?;
        let pair = ModelPair::new(s, g, d, cfg.mode, cfg.ema_decay)?;
        Self::with_pair(cfg, pair)
    }

    /// Starts from given generators; the discriminator is freshly initialized.
    pub fn from_generators(cfg: TrainConfig, specialist: Generator, generalist: Generator) -> Result<Self> {
        cfg.validate()?;
        let d = Discriminator::new(&cfg.discriminator, derive(cfg.seed, STREAM_INIT_D))?;
        let pair = ModelPair::new(specialist, generalist, d, cfg.mode, cfg.ema_decay)?;
        Self::with_pair(cfg, pair)
    }

    pub fn with_pair(cfg: TrainConfig, pair: ModelPair) -> Result<Self> {
        cfg.validate()?;
        if pair.mode != cfg.mode {
            return Err(PddError::Config(format!("model pair is in {} mode, config says {}", pair.mode, cfg.mode)));
        }
        if pair.specialist.config().scale != cfg.scale {
            return Err(PddError::Config("specialist scale differs from config scale".into()));
        }
        let extractor = FeatureExtractor::from_config(&cfg.features)?;
        let opt_g = Adam::new(pair.specialist.params(), &cfg);
        let opt_d = Adam::new(pair.discriminator.params(), &cfg);
        Ok(Self { cfg, pair, extractor, opt_g, opt_d, history: VecDeque::new(), probe: None })
    }

    /// Initial networks per mode from `cfg.init`, or a resumed run.
    pub fn from_config(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if let Some(path) = &cfg.init.resume {
            return Self::resume(cfg.clone(), path);
        }
        let load = |p: &Option<PathBuf>| -> Result<Option<Generator>> {
            p.as_ref().map(|p| Ok(Checkpoint::load(p)?.pair.specialist)).transpose()
        };
        let from_s = load(&cfg.init.specialist)?;
        let from_g = load(&cfg.init.generalist)?;
        let fresh = |stream| Generator::new(&cfg.generator, derive(cfg.seed, stream));
        let (s, g) = match cfg.mode {
            TrainMode::PddEma | TrainMode::SingleFixed => {
                let g = match from_g {
                    Some(g) => g,
                    None => fresh(STREAM_INIT_S)?,
                };
                (g.clone(), g)
            }
            _ => (
                match from_s {
                    Some(s) => s,
                    None => fresh(STREAM_INIT_S)?,
                },
                match from_g {
                    Some(g) => g,
                    None => fresh(STREAM_INIT_G)?,
                },
            ),
        };
        Self::from_generators(cfg, s, g)
    }

    /// Restores models, optimizer moments and loss history from a checkpoint of this run.
    pub fn resume(cfg: TrainConfig, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.rng_state.seed != cfg.seed {
            return Err(PddError::Config(format!("checkpoint seed {} differs from config seed {}", ckpt.rng_state.seed, cfg.seed)));
        }
        let state: TrainerState = serde_json::from_value(ckpt.trainer_state.clone())
            .map_err(|e| PddError::Data(format!("{}: trainer state: {e}", path.display())))?;
        let mut t = Self::with_pair(cfg, ckpt.pair)?;
        t.opt_g.read_from(&ckpt.extra, "adam_g.", state.adam_g_t)?;
        t.opt_d.read_from(&ckpt.extra, "adam_d.", state.adam_d_t)?;
        t.history = state.history.into();
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.pair.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = Archive::default();
        self.opt_g.write_into(&mut extra, "adam_g.");
        self.opt_d.write_into(&mut extra, "adam_d.");
        let state = TrainerState { adam_g_t: self.opt_g.t, adam_d_t: self.opt_d.t, history: self.history.iter().copied().collect() };
        Checkpoint {
            pair: self.pair.clone(),
            rng_state: RngState { seed: self.cfg.seed, next_step: self.pair.step },
            extra,
            trainer_state: serde_json::to_value(state).expect("plain data serializes"),
        }
    }

    /// Binds the generalist as trainable leaves so its gradients can be inspected.
    pub fn enable_generalist_probe(&mut self) {
        self.probe = Some(0.0);
    }

    /// Largest absolute gradient that reached a generalist parameter since the probe was enabled.
    pub fn generalist_probe(&self) -> Option<f64> {
        self.probe
    }

    fn median(&self) -> Option<f64> {
        if self.history.len() < SPIKE_WARMUP {
            return None;
        }
        let mut v: Vec<f64> = self.history.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    /// Generalist predictions as constants, optionally through a probed trainable binding.
    fn generalist_outputs(&mut self, g: &mut Graph<f32>, x_u: Var, x_l: Var) -> Result<(Var, Var, Option<Bound>)> {
        let probing = self.probe.is_some();
        let bound = self.pair.generalist.bind(g, probing);
        let yg_u = self.pair.generalist.forward(g, &bound, x_u)?;
        let yg_l = self.pair.generalist.forward(g, &bound, x_l)?;
        Ok((g.detach(yg_u), g.detach(yg_l), probing.then_some(bound)))
    }

    /// One generator update, then discriminator update(s), then EMA (ema mode).
    pub fn train_step(&mut self, batch: &Batch, data: Option<&TrainData>) -> Result<StepRecord> {
        let step = self.pair.step;
        if batch.step != step {
            return Err(PddError::InvalidState(format!("batch for step {} fed at step {step}", batch.step)));
        }
        let w = self.cfg.weights.clone();
        let uses_gan = w.uses_gan();
        if uses_gan {
            self.pair.discriminator.power_iterate()?;
        }
        let lr = lr_at(step, &self.cfg);
        let mode = self.cfg.mode;

        let mut g = Graph::<f32>::new();
        let sb = self.pair.specialist.bind(&mut g, true);
        let eb = self.extractor.bind(&mut g);
        let cb = self.pair.discriminator.bind(&mut g, false)?;
        let x_l = g.constant(batch.x_l.clone());
        let y_l = g.constant(batch.y_l.clone());
        let x_u = g.constant(batch.x_u.clone());
        let ys_l = self.pair.specialist.forward(&mut g, &sb, x_l)?;
        let (ys_u, probe_bound) = if mode == TrainMode::SupervisedOnly {
            (None, None)
        } else {
            (Some(self.pair.specialist.forward(&mut g, &sb, x_u)?), None::<Bound>)
        };
        let mut probe_bound = probe_bound;
        let (yg_u, yg_l) = if mode.uses_generalist() {
            let (a, b, pb) = self.generalist_outputs(&mut g, x_u, x_l)?;
            probe_bound = pb;
            (Some(a), Some(b))
        } else {
            (None, None)
        };

        let ctx = LossCtx {
            extractor: &self.extractor,
            extractor_bound: &eb,
            critic: &self.pair.discriminator,
            critic_bound: &cb,
            weights: &w,
        };
        let mut report = LossReport::default();
        let value = |g: &Graph<f32>, v: Var| g.value(v).item() as f64;
        let total = match mode {
            TrainMode::SupervisedOnly => {
                let t = ctx.labeled(&mut g, ys_l, y_l, None, None)?;
                report.l_wv = value(&g, t.wv);
                report.l_vgg = value(&g, t.vgg);
                report.l_gan_lab = t.gan.map_or(0.0, |v| value(&g, v));
                report.l_l = value(&g, t.total);
                report.total = report.l_l;
                t.total
            }
            TrainMode::NaiveDistill => {
                let (ys_u, yg_u) = (ys_u.expect("computed"), yg_u.expect("computed"));
                let unl = ctx.labeled(&mut g, ys_u, yg_u, None, None)?;
                let lab = ctx.labeled(&mut g, ys_l, y_l, None, None)?;
                let scaled = g.scale(lab.total, w.lambda_nd);
                let total = g.add(unl.total, scaled)?;
                report.l_wv = value(&g, lab.wv);
                report.l_vgg = value(&g, lab.vgg);
                report.l_gan_lab = lab.gan.map_or(0.0, |v| value(&g, v));
                report.l_gan_unlab = unl.gan.map_or(0.0, |v| value(&g, v));
                report.l_l = value(&g, lab.total);
                report.l_nd = Some(value(&g, total));
                report.total = value(&g, total);
                total
            }
            _ => {
                let quad = QuadVars { ys_u: ys_u.expect("computed"), yg_u: yg_u.expect("computed"), ys_l, yg_l: yg_l.expect("computed") };
                let fs_l = ctx.features(&mut g, quad.ys_l)?;
                let fs_u = ctx.features(&mut g, quad.ys_u)?;
                let fg_l = ctx.features(&mut g, quad.yg_l)?;
                let fg_u = ctx.features(&mut g, quad.yg_u)?;
                let lab = if w.alpha_vgg > 0.0 {
                    let fy = ctx.features(&mut g, y_l)?;
                    ctx.labeled(&mut g, ys_l, y_l, Some(&fs_l), Some(&fy))?
                } else {
                    ctx.labeled(&mut g, ys_l, y_l, None, None)?
                };
                let unl = ctx.unlabeled(&mut g, &quad, &fs_u, &fg_u, &fs_l, &fg_l)?;
                let total = g.add(lab.total, unl.total)?;
                report.r_intra = value(&g, unl.r_intra);
                report.r_inter = value(&g, unl.r_inter);
                report.l_wv = value(&g, lab.wv);
                report.l_vgg = value(&g, lab.vgg);
                report.l_gan_lab = lab.gan.map_or(0.0, |v| value(&g, v));
                report.l_gan_unlab = unl.gan.map_or(0.0, |v| value(&g, v));
                report.l_l = value(&g, lab.total);
                report.l_u = value(&g, unl.total);
                report.total = value(&g, total);
                total
            }
        };

        if !report.all_finite() {
            let detail = match data {
                Some(d) => batch.describe(d),
                None => format!("labeled {:?}, unlabeled {:?}", batch.labeled_ids, batch.unlabeled_ids),
            };
            return Err(PddError::NonFinite { step, detail: format!("{report:?}; batch: {detail}") });
        }
        let skipped = self.median().is_some_and(|m| report.total > self.cfg.spike_factor * m);
        if skipped {
            log::warn!("step {step}: loss {} exceeds {}x the running median, skipped", report.total, self.cfg.spike_factor);
            self.pair.step += 1;
            return Ok(StepRecord { step, lr, skipped, report });
        }
        self.history.push_back(report.total);
        while self.history.len() > self.cfg.spike_window {
            self.history.pop_front();
        }

        if g.requires_grad(total) {
            let grads = g.backward(total)?;
            if let (Some(pb), Some(probe)) = (&probe_bound, self.probe.as_mut()) {
                for (_, v) in pb.leaves() {
                    if let Some(t) = grads.get(*v) {
                        *probe = t.data().iter().fold(*probe, |m, x| m.max(x.abs() as f64));
                    }
                }
            }
            let gs = collect_grads(&grads, &sb);
            self.opt_g.step(self.pair.specialist.params_mut(), &gs, lr)?;
        }

        if uses_gan {
            let fakes: Vec<&Tensor<f32>> = std::iter::once(g.value(ys_l)).chain(ys_u.map(|v| g.value(v))).collect();
            let fake = concat_batch(&fakes)?;
            let mut reals = vec![&batch.y_l];
            if let Some(p) = &batch.hr_pool {
                reals.push(p);
            }
            let real = concat_batch(&reals)?;
            drop(g);
            let mut l_disc = 0.0;
            for k in 0..self.cfg.disc_updates_per_step {
                if k > 0 {
                    self.pair.discriminator.power_iterate()?;
                }
                l_disc = self.discriminator_update(&real, &fake, lr)?;
            }
            report.l_disc = Some(l_disc);
        }

        if mode == TrainMode::PddEma {
            ema_update(&mut self.pair)?;
        }
        self.pair.step += 1;
        Ok(StepRecord { step, lr, skipped, report })
    }

    fn discriminator_update(&mut self, real: &Tensor<f32>, fake: &Tensor<f32>, lr: f64) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let d = &self.pair.discriminator;
        let db = d.bind(&mut g, true)?;
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let rl = d.logits(&mut g, &db, r)?;
        let fl = d.logits(&mut g, &db, f)?;
        let loss = crate::losses::gan_discriminator_graph(&mut g, rl, fl)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(PddError::NonFinite { step: self.pair.step, detail: "discriminator loss".into() });
        }
        let grads = g.backward(loss)?;
        let gs = collect_grads(&grads, &db);
        self.opt_d.step(self.pair.discriminator.params_mut(), &gs, lr)?;
        Ok(value)
    }
}

fn concat_batch(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = parts.first().ok_or_else(|| PddError::InvalidInput("nothing to concatenate".into()))?;
    let tail = &first.shape()[1..];
    let mut n = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(PddError::InvalidShape(format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        n += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(tail);
    Ok(Tensor::new(&shape, data)?)
}

/// Files produced by [`fit`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub eval_summary: Option<PathBuf>,
    pub records: Vec<StepRecord>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.bin")
}

/// End-of-run evaluation of the specialist against bicubic interpolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub step: u64,
    pub specialist: EvalReport,
    pub bicubic: EvalReport,
}

/// Runs training to `cfg.total_iters` from the config's data paths.
pub fn fit(cfg: &TrainConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = TrainData::load(&cfg.data)?;
    let trainer = Trainer::from_config(cfg.clone())?;
    fit_with(trainer, &data, out_dir)
}

/// Runs `trainer` to `total_iters` on in-memory data, writing the run directory.
///
/// On failure `status.json` records `complete: false` and the error.
pub fn fit_with(mut trainer: Trainer, data: &TrainData, out_dir: &Path) -> Result<RunArtifacts> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let status = out_dir.join("status.json");
    fs::write(&status, json!({ "complete": false, "error": null }).to_string()).at(&status)?;
    let result = run(&mut trainer, data, out_dir);
    let body = match &result {
        Ok(_) => json!({ "complete": true, "error": null, "step": trainer.step() }),
        Err(e) => json!({ "complete": false, "error": e.to_string(), "step": trainer.step() }),
    };
    fs::write(&status, serde_json::to_string_pretty(&body)?).at(&status)?;
    result
}

fn run(trainer: &mut Trainer, data: &TrainData, out_dir: &Path) -> Result<RunArtifacts> {
    let cfg = trainer.cfg.clone();
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?).at(&cfg_path)?;
    let log_path = out_dir.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).at(&log_path)?);
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.step() < cfg.total_iters {
        let batch = make_batch(data, &cfg, trainer.step())?;
        let rec = trainer.train_step(&batch, Some(data))?;
        writeln!(log, "{}", serde_json::to_string(&rec)?).at(&log_path)?;
        records.push(rec);
        let done = trainer.step();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_iters {
            let p = out_dir.join(checkpoint_name(done));
            trainer.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
    }
    log.flush().at(&log_path)?;
    let final_checkpoint = out_dir.join(checkpoint_name(trainer.step()));
    trainer.checkpoint().save(&final_checkpoint)?;
    checkpoints.push(final_checkpoint.clone());

    let eval_summary = if data.val.is_empty() {
        None
    } else {
        let summary = EvalSummary {
            step: trainer.step(),
            specialist: evaluate_model(&trainer.pair.specialist, &data.val, "val", "specialist", false)?,
            bicubic: evaluate_model(&BicubicUpsampler { scale: cfg.scale }, &data.val, "val", "bicubic", false)?,
        };
        let p = out_dir.join("eval_summary.json");
        fs::write(&p, serde_json::to_string_pretty(&summary)?).at(&p)?;
        Some(p)
    };
    Ok(RunArtifacts { out_dir: out_dir.into(), checkpoints, final_checkpoint, log: log_path, eval_summary, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_boundary() {
        let cfg = TrainConfig { halve_at: 25_000, total_iters: 50_000, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(24_999, &cfg), 1e-4);
        assert_eq!(lr_at(25_000, &cfg), 5e-5);
        assert_eq!(lr_at(49_999, &cfg), 5e-5);
    }

    #[test]
    fn validation_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 7, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { halve_at: 5000, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::full_scale(TrainMode::PddStatic).validate().is_ok());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0f32, -1.0]).unwrap());
        let mut opt = Adam::new(&p, &TrainConfig::default());
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![0.5f32, -3.0]).unwrap())]);
        opt.step(&mut p, &grads, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
