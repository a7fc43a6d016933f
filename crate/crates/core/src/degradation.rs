//! Synthetic degradations: blur, resize, noise and JPEG stages, randomized
//! pipelines that sample them, and dataset synthesis with a JSON manifest.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::IoContext;
use crate::imaging::resample::{resize, Interp};
use crate::imaging::{read_png, write_png, ImageTensor};
use crate::seeding::rng_for;
use crate::{PddError, Result};

const MAX_KERNEL_RADIUS: usize = 10;
pub const MANIFEST_VERSION: u32 = 1;

/// One fully-resolved degradation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradationStage {
    GaussianBlur { sigma: f64 },
    AnisotropicBlur { sigma_x: f64, sigma_y: f64, theta: f64 },
    GaussianNoise { sigma: f64, seed: u64 },
    Resize { interp: Interp, factor: f64 },
    Jpeg { quality: u8 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationRecipe {
    pub stages: Vec<DegradationStage>,
    pub final_scale: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "D_S")]
    Specific,
    #[serde(rename = "D_G")]
    General,
    #[serde(rename = "pseudo_real")]
    PseudoReal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    /// blur → resize → noise → jpeg within every round
    Fixed,
    /// blur/resize/noise shuffled per round; jpeg stays last
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurRange {
    /// Sampled log-uniformly.
    pub sigma: [f64; 2],
    /// Probability of drawing an anisotropic kernel instead of an isotropic one.
    #[serde(default)]
    pub anisotropic_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeRange {
    /// Sampled uniformly.
    pub factor: [f64; 2],
    pub interps: Vec<Interp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRange {
    /// Standard deviation on the `[0, 1]` scale, sampled log-uniformly.
    pub sigma: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JpegRange {
    pub quality: [u8; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub domain: Domain,
    pub rounds: usize,
    pub order: StageOrder,
    pub final_scale: usize,
    #[serde(default)]
    pub blur: Option<BlurRange>,
    #[serde(default)]
    pub resize: Option<ResizeRange>,
    #[serde(default)]
    pub noise: Option<NoiseRange>,
    #[serde(default)]
    pub jpeg: Option<JpegRange>,
    /// The last round's resize lands on the LR size, so that round's noise and
    /// JPEG act at LR resolution instead of being averaged away by the final
    /// downsample.
    #[serde(default)]
    pub scale_in_last_round: bool,
}

impl PipelineConfig {
    /// Bicubic downsampling only.
    pub fn specific(scale: usize) -> Self {
        Self {
            domain: Domain::Specific,
            rounds: 1,
            order: StageOrder::Fixed,
            final_scale: scale,
            blur: None,
            resize: None,
            noise: None,
            jpeg: None,
            scale_in_last_round: false,
        }
    }

    /// Two randomized rounds of blur → resize → noise → JPEG.
    pub fn general(scale: usize) -> Self {
        Self {
            domain: Domain::General,
            rounds: 2,
            order: StageOrder::Fixed,
            final_scale: scale,
            blur: Some(BlurRange { sigma: [0.2, 3.0], anisotropic_prob: 0.3 }),
            resize: Some(ResizeRange { factor: [0.5, 1.2], interps: vec![Interp::Bicubic, Interp::Bilinear, Interp::Nearest] }),
            noise: Some(NoiseRange { sigma: [1.0 / 255.0, 25.0 / 255.0] }),
            jpeg: Some(JpegRange { quality: [30, 95] }),
            scale_in_last_round: true,
        }
    }

    /// Fixed held-out target domain: blur 1.5, bicubic ↓scale, noise 10/255, JPEG 60.
    pub fn pseudo_real(scale: usize) -> Self {
        Self {
            domain: Domain::PseudoReal,
            rounds: 1,
            order: StageOrder::Fixed,
            final_scale: scale,
            blur: Some(BlurRange { sigma: [1.5, 1.5], anisotropic_prob: 0.0 }),
            resize: Some(ResizeRange { factor: [1.0 / scale as f64; 2], interps: vec![Interp::Bicubic] }),
            noise: Some(NoiseRange { sigma: [10.0 / 255.0; 2] }),
            jpeg: Some(JpegRange { quality: [60, 60] }),
            scale_in_last_round: false,
        }
    }

    pub fn preset(domain: Domain, scale: usize) -> Self {
        match domain {
            Domain::Specific => Self::specific(scale),
            Domain::General => Self::general(scale),
            Domain::PseudoReal => Self::pseudo_real(scale),
        }
    }

    /// Number of stages every sampled recipe contains.
    pub fn stage_count(&self) -> usize {
        let per_round = [self.blur.is_some(), self.resize.is_some(), self.noise.is_some(), self.jpeg.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        per_round * self.rounds
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PddError::Config(msg));
        if self.final_scale == 0 {
            return bad("final_scale must be positive".into());
        }
        if self.rounds == 0 || self.rounds > 2 {
            return bad(format!("rounds must be 1 or 2, got {}", self.rounds));
        }
        let positive_range = |name: &str, r: [f64; 2]| -> Result<()> {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(PddError::Config(format!("{name} range {r:?} must satisfy 0 < lo <= hi")));
            }
            Ok(())
        };
        if let Some(b) = &self.blur {
            positive_range("blur sigma", b.sigma)?;
            if !(0.0..=1.0).contains(&b.anisotropic_prob) {
                return bad(format!("anisotropic_prob {} outside [0, 1]", b.anisotropic_prob));
            }
        }
        if self.scale_in_last_round && self.resize.is_none() {
            return bad("scale_in_last_round needs a resize stage".into());
        }
        if let Some(r) = &self.resize {
            positive_range("resize factor", r.factor)?;
            if r.interps.is_empty() {
                return bad("resize needs at least one interpolation mode".into());
            }
        }
        if let Some(n) = &self.noise {
            positive_range("noise sigma", n.sigma)?;
        }
        if let Some(j) = &self.jpeg {
            if !(1 <= j.quality[0] && j.quality[0] <= j.quality[1] && j.quality[1] <= 100) {
                return bad(format!("jpeg quality range {:?} must lie in 1..=100", j.quality));
            }
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi)
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws one recipe from `cfg`; a pure function of `(cfg, seed)`.
pub fn sample_recipe(cfg: &PipelineConfig, seed: u64) -> Result<DegradationRecipe> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0);
    let mut stages = Vec::with_capacity(cfg.stage_count());
    let mut net_factor = 1.0;
    for round_idx in 0..cfg.rounds {
        let mut round: Vec<DegradationStage> = Vec::with_capacity(4);
        if let Some(b) = &cfg.blur {
            let aniso = b.anisotropic_prob > 0.0 && rng.random::<f64>() < b.anisotropic_prob;
            round.push(if aniso {
                DegradationStage::AnisotropicBlur {
                    sigma_x: log_uniform(&mut rng, b.sigma),
                    sigma_y: log_uniform(&mut rng, b.sigma),
                    theta: rng.random_range(0.0..std::f64::consts::PI),
                }
            } else {
                DegradationStage::GaussianBlur { sigma: log_uniform(&mut rng, b.sigma) }
            });
        }
        if let Some(r) = &cfg.resize {
            let interp = r.interps[rng.random_range(0..r.interps.len())];
            let mut factor = uniform(&mut rng, r.factor);
            if cfg.scale_in_last_round && round_idx + 1 == cfg.rounds {
                factor = 1.0 / (cfg.final_scale as f64 * net_factor);
            }
            net_factor *= factor;
            round.push(DegradationStage::Resize { interp, factor });
        }
        if let Some(n) = &cfg.noise {
            round.push(DegradationStage::GaussianNoise { sigma: log_uniform(&mut rng, n.sigma), seed: rng.random() });
        }
        if cfg.order == StageOrder::Shuffled {
            round.shuffle(&mut rng);
        }
        if let Some(j) = &cfg.jpeg {
            round.push(DegradationStage::Jpeg { quality: rng.random_range(j.quality[0]..=j.quality[1]) });
        }
        stages.extend(round);
    }
    Ok(DegradationRecipe { stages, final_scale: cfg.final_scale, seed })
}

fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, MAX_KERNEL_RADIUS);
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn anisotropic_kernel(sigma_x: f64, sigma_y: f64, theta: f64) -> (usize, Vec<f64>) {
    let radius = ((3.0 * sigma_x.max(sigma_y)).ceil() as usize).clamp(1, MAX_KERNEL_RADIUS);
    let size = 2 * radius + 1;
    let (s, c) = theta.sin_cos();
    let (ix, iy) = (1.0 / (sigma_x * sigma_x), 1.0 / (sigma_y * sigma_y));
    let mut k = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - radius as f64, j as f64 - radius as f64);
            // rotate into the kernel's principal axes
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            k.push((-0.5 * (u * u * ix + v * v * iy)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    (radius, k.into_iter().map(|v| v / total).collect())
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn blur_separable(img: &ImageTensor, k: &[f64]) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let r = (k.len() / 2) as isize;
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| {
            let p = img.plane(c);
            let mut tmp = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    tmp[y * w + x] = k.iter().enumerate().map(|(t, kv)| kv * p[y * w + clamp_index(x as isize + t as isize - r, w)]).sum();
                }
            }
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[clamp_index(y as isize + t as isize - r, h) * w + x]).sum();
                }
            }
            out
        })
        .collect();
    ImageTensor::from_planes_clipped(h, w, &planes, img.colorspace())
}

fn blur_2d(img: &ImageTensor, radius: usize, k: &[f64]) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let size = 2 * radius + 1;
    let r = radius as isize;
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| {
            let p = img.plane(c);
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for i in 0..size {
                        let sy = clamp_index(y as isize + i as isize - r, h);
                        for j in 0..size {
                            acc += k[i * size + j] * p[sy * w + clamp_index(x as isize + j as isize - r, w)];
                        }
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        })
        .collect();
    ImageTensor::from_planes_clipped(h, w, &planes, img.colorspace())
}

fn add_noise(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| PddError::Config(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = rng_for(seed, 1);
    let data = img.data().iter().map(|&v| v + normal.sample(&mut rng)).collect();
    ImageTensor::new_clipped(img.height(), img.width(), img.channels(), data, img.colorspace())
}

/// Round trip through a baseline JPEG encoder/decoder at `quality`.
pub fn jpeg_round_trip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let rgb = crate::imaging::to_rgb8(img)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100)).encode_image(&rgb)?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_rgb8();
    crate::imaging::from_rgb8(&decoded)
}

pub fn apply_stage(img: &ImageTensor, stage: &DegradationStage) -> Result<ImageTensor> {
    match *stage {
        DegradationStage::GaussianBlur { sigma } => {
            if !(sigma > 0.0) {
                return Err(PddError::InvalidInput(format!("blur sigma {sigma}")));
            }
            blur_separable(img, &gaussian_kernel_1d(sigma))
        }
        DegradationStage::AnisotropicBlur { sigma_x, sigma_y, theta } => {
            if !(sigma_x > 0.0 && sigma_y > 0.0) {
                return Err(PddError::InvalidInput(format!("blur sigmas {sigma_x}, {sigma_y}")));
            }
            let (r, k) = anisotropic_kernel(sigma_x, sigma_y, theta);
            blur_2d(img, r, &k)
        }
        DegradationStage::GaussianNoise { sigma, seed } => {
            if !(sigma >= 0.0) {
                return Err(PddError::InvalidInput(format!("noise sigma {sigma}")));
            }
            add_noise(img, sigma, seed)
        }
        DegradationStage::Resize { interp, factor } => {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(PddError::InvalidInput(format!("resize factor {factor}")));
            }
            let h = ((img.height() as f64 * factor).round() as usize).max(1);
            let w = ((img.width() as f64 * factor).round() as usize).max(1);
            resize(img, h, w, interp)
        }
        DegradationStage::Jpeg { quality } => jpeg_round_trip(img, quality),
    }
}

fn check_divisible(hr: &ImageTensor, scale: usize) -> Result<()> {
    if scale == 0 || hr.height() % scale != 0 || hr.width() % scale != 0 {
        return Err(PddError::InvalidShape(format!(
            "{}x{} not divisible by scale {scale}",
            hr.height(),
            hr.width()
        )));
    }
    Ok(())
}

pub fn bicubic_downsample(hr: &ImageTensor, scale: usize) -> Result<ImageTensor> {
    check_divisible(hr, scale)?;
    resize(hr, hr.height() / scale, hr.width() / scale, Interp::Bicubic)
}

/// Applies the stages in order, then bicubic-resizes to exactly `1 / final_scale`
/// of the input size (skipped when the stages already landed there).
pub fn apply_recipe(hr: &ImageTensor, recipe: &DegradationRecipe) -> Result<ImageTensor> {
    check_divisible(hr, recipe.final_scale)?;
    let (th, tw) = (hr.height() / recipe.final_scale, hr.width() / recipe.final_scale);
    let mut img = hr.clone();
    for stage in &recipe.stages {
        img = apply_stage(&img, stage)?;
    }
    if (img.height(), img.width()) != (th, tw) {
        img = resize(&img, th, tw, Interp::Bicubic)?;
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub hr_path: PathBuf,
    pub lr_path: PathBuf,
    pub recipe: DegradationRecipe,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub scale: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(PddError::Data(format!("manifest version {} (expected {MANIFEST_VERSION})", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }

    /// Loads every `(lr, hr)` pair; relative paths resolve against `base`.
    pub fn load_pairs(&self, base: &Path) -> Result<Vec<(ImageTensor, ImageTensor)>> {
        self.entries
            .iter()
            .map(|e| Ok((read_png(&base.join(&e.lr_path))?, read_png(&base.join(&e.hr_path))?)))
            .collect()
    }
}

/// Sorted list of `*.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Degrades every PNG in `hr_dir` into `out_dir/lr/` and writes `out_dir/manifest.json`.
///
/// Image `i` uses a recipe seeded from `(seed, i)` only, so the output does not
/// depend on processing order.
pub fn synthesize_dataset(hr_dir: &Path, cfg: &PipelineConfig, out_dir: &Path, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let inputs = list_pngs(hr_dir)?;
    if inputs.is_empty() {
        return Err(PddError::Io {
            path: hr_dir.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG files"),
        });
    }
    let lr_dir = out_dir.join("lr");
    fs::create_dir_all(&lr_dir).at(&lr_dir)?;
    let hr_abs = fs::canonicalize(hr_dir).at(hr_dir)?;
    let mut entries = Vec::with_capacity(inputs.len());
    for (i, path) in inputs.iter().enumerate() {
        let image_seed = crate::seeding::derive(seed, i as u64);
        let recipe = sample_recipe(cfg, image_seed)?;
        let hr = read_png(path)?;
        let lr = apply_recipe(&hr, &recipe)?;
        let name = path.file_name().expect("listed files have names");
        write_png(&lr, &lr_dir.join(name))?;
        entries.push(ManifestEntry {
            hr_path: hr_abs.join(name),
            lr_path: PathBuf::from("lr").join(name),
            recipe,
            seed: image_seed,
        });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, scale: cfg.final_scale, entries };
    manifest.save(&out_dir.join(Manifest::FILE_NAME))?;
    Ok(manifest)
}

/// Degrades in-memory images without touching the filesystem.
pub fn degrade_all(hr: &[ImageTensor], cfg: &PipelineConfig, seed: u64) -> Result<Vec<(ImageTensor, DegradationRecipe)>> {
    hr.iter()
        .enumerate()
        .map(|(i, img)| {
            let recipe = sample_recipe(cfg, crate::seeding::derive(seed, i as u64))?;
            Ok((apply_recipe(img, &recipe)?, recipe))
        })
        .collect()
}
