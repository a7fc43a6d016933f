//! Color correction, Y-channel fidelity metrics, feature-distribution gap analysis
//! and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::degradation::Manifest;
use crate::error::IoContext;
use crate::features::{pooled_descriptor, FeatureExtractor, GaussianStats};
use crate::imaging::resample::{resize, Interp};
use crate::imaging::{ColorSpace, ImageTensor};
use crate::models::{Checkpoint, Generator};
use crate::{PddError, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Ridge added to covariances before inversion.
pub const COV_RIDGE: f64 = 1e-6;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn require_rgb(img: &ImageTensor, what: &str) -> Result<()> {
    if img.channels() != 3 || img.colorspace() != ColorSpace::Rgb {
        return Err(PddError::InvalidInput(format!("{what} must be an RGB image")));
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Per-channel affine remap of `sr` onto the mean/std of `lr`, before clipping.
///
/// A constant SR channel is set to the LR channel mean.
pub fn color_correct_planes(sr: &ImageTensor, lr: &ImageTensor) -> Result<Vec<Vec<f64>>> {
    require_rgb(sr, "SR image")?;
    require_rgb(lr, "LR image")?;
    Ok((0..3)
        .map(|c| {
            let s = sr.plane(c);
            let (ms, ss) = mean_std(&s);
            let (ml, sl) = mean_std(&lr.plane(c));
            // rounding leaves a constant plane with a std of a few ulps
            if ss <= 1e-12 * ms.abs().max(1.0) {
                vec![ml; s.len()]
            } else {
                let k = sl / ss;
                s.iter().map(|v| (v - ms) * k + ml).collect()
            }
        })
        .collect())
}

/// [`color_correct_planes`] clipped into `[0, 1]`.
pub fn color_correct(sr: &ImageTensor, lr: &ImageTensor) -> Result<ImageTensor> {
    let planes = color_correct_planes(sr, lr)?;
    let out = ImageTensor::from_planes_clipped(sr.height(), sr.width(), &planes, ColorSpace::Rgb)?;
    Ok(match sr.meta() {
        Some(m) => out.with_meta(m),
        None => out,
    })
}

fn y_planes(a: &ImageTensor, b: &ImageTensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(PddError::InvalidShape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let y = |img: &ImageTensor| -> Result<Vec<f64>> {
        Ok(if img.channels() == 1 { img.data().to_vec() } else { img.luma()?.data().to_vec() })
    };
    Ok((y(a)?, y(b)?))
}

/// Mean squared error of the luma planes.
pub fn mse_y(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (ya, yb) = y_planes(a, b)?;
    Ok(ya.iter().zip(&yb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / ya.len() as f64)
}

/// `10·log10(1 / MSE_Y)`, capped at [`PSNR_CAP`].
pub fn psnr_y(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let mse = mse_y(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a plane with `k` along both axes.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of the luma planes with an 11x11 Gaussian window (σ = 1.5), valid positions only.
pub fn ssim_y(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (ya, yb) = y_planes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(PddError::InvalidShape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, ..) = filter_valid(&ya, h, w, &k);
    let (mu_b, ..) = filter_valid(&yb, h, w, &k);
    let (aa, ..) = filter_valid(&prod(&ya, &ya), h, w, &k);
    let (bb, ..) = filter_valid(&prod(&yb, &yb), h, w, &k);
    let (ab, ..) = filter_valid(&prod(&ya, &yb), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Mean forward-difference gradient magnitude of the luma plane.
pub fn sharpness(img: &ImageTensor) -> Result<f64> {
    let y = if img.channels() == 1 { img.clone() } else { img.luma()? };
    let (h, w) = (y.height(), y.width());
    if h < 2 || w < 2 {
        return Err(PddError::InvalidShape(format!("sharpness needs at least 2x2, got {h}x{w}")));
    }
    let p = y.data();
    let mut total = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let dx = p[i * w + j + 1] - p[i * w + j];
            let dy = p[(i + 1) * w + j] - p[i * w + j];
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(total / ((h - 1) * (w - 1)) as f64)
}

fn symmetrized(cov: &DMatrix<f64>) -> DMatrix<f64> {
    (cov + cov.transpose()) * 0.5
}

/// Adds [`COV_RIDGE`] to the diagonal so sample covariances with fewer samples
/// than dimensions stay invertible.
pub fn with_ridge(mut stats: GaussianStats) -> GaussianStats {
    let d = stats.cov.nrows();
    stats.cov += DMatrix::identity(d, d) * COV_RIDGE;
    stats
}

/// Closed-form `KL(P ‖ Q)` between Gaussians; both covariances must be positive definite.
pub fn kl_gaussian(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    let d = p.mean.len();
    if q.mean.len() != d || p.cov.shape() != (d, d) || q.cov.shape() != (d, d) {
        return Err(PddError::InvalidInput(format!("dimension mismatch: {d} vs {}", q.mean.len())));
    }
    let sp = symmetrized(&p.cov);
    let sq = symmetrized(&q.cov);
    let chol_q = sq.clone().cholesky().ok_or_else(|| PddError::InvalidInput("Q covariance is not positive definite".into()))?;
    let chol_p = sp.clone().cholesky().ok_or_else(|| PddError::InvalidInput("P covariance is not positive definite".into()))?;
    let trace = chol_q.solve(&sp).trace();
    let diff: DVector<f64> = &q.mean - &p.mean;
    let maha = diff.dot(&chol_q.solve(&diff));
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let kl = 0.5 * (trace + maha - d as f64 + logdet(&chol_q.l()) - logdet(&chol_p.l()));
    // rounding can leave tiny negatives for identical inputs
    Ok(kl.max(0.0))
}

/// A super-resolution model that can be evaluated.
pub trait SrModel {
    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor>;
}

impl SrModel for Generator {
    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        self.predict(lr)
    }
}

/// Plain bicubic interpolation, the "no model" baseline.
#[derive(Clone, Copy, Debug)]
pub struct BicubicUpsampler {
    pub scale: usize,
}

impl SrModel for BicubicUpsampler {
    fn upscale(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        resize(lr, lr.height() * self.scale, lr.width() * self.scale, Interp::Bicubic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub psnr_y: f64,
    pub ssim_y: f64,
    /// Externally computed metrics merged from CSV.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub model_id: String,
    pub color_correction: bool,
    pub images: Vec<ImageScore>,
    /// Mean of every per-image metric.
    pub means: BTreeMap<String, f64>,
}

impl EvalReport {
    fn recompute_means(&mut self) {
        let n = self.images.len() as f64;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in &self.images {
            let mut add = |k: &str, v: f64| {
                let e = sums.entry(k.to_string()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            };
            add("psnr_y", s.psnr_y);
            add("ssim_y", s.ssim_y);
            for (k, v) in &s.extra {
                add(k, *v);
            }
        }
        self.means = sums.into_iter().map(|(k, (s, c))| (k, if c as f64 == n { s / n } else { s / c as f64 })).collect();
    }

    pub fn mean(&self, metric: &str) -> Result<f64> {
        self.means.get(metric).copied().ok_or_else(|| PddError::InvalidInput(format!("report has no metric `{metric}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }

    /// Merges rows `image_id, metric_name, value` from an external CSV file.
    pub fn merge_csv(&mut self, path: &Path) -> Result<()> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| PddError::Data(format!("{}: {e}", path.display())))?;
        for row in reader.records() {
            let row = row.map_err(|e| PddError::Data(format!("{}: {e}", path.display())))?;
            if row.len() != 3 {
                return Err(PddError::Data(format!("{}: expected 3 columns, got {}", path.display(), row.len())));
            }
            let value: f64 = row[2].parse().map_err(|_| PddError::Data(format!("bad value `{}`", &row[2])))?;
            let score = self
                .images
                .iter_mut()
                .find(|s| s.image_id == row[0])
                .ok_or_else(|| PddError::Data(format!("unknown image `{}`", &row[0])))?;
            score.extra.insert(row[1].to_string(), value);
        }
        self.recompute_means();
        Ok(())
    }
}

/// Scores `model` on `(lr, hr, id)` triples in the given order.
pub fn evaluate_model<M: SrModel + ?Sized>(
    model: &M,
    data: &[(ImageTensor, ImageTensor, String)],
    dataset_id: &str,
    model_id: &str,
    color_correction: bool,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(PddError::InvalidInput("empty evaluation set".into()));
    }
    let images = data
        .iter()
        .map(|(lr, hr, id)| {
            let mut sr = model.upscale(lr)?;
            if color_correction {
                sr = color_correct(&sr, lr)?;
            }
            Ok(ImageScore { image_id: id.clone(), psnr_y: psnr_y(&sr, hr)?, ssim_y: ssim_y(&sr, hr)?, extra: BTreeMap::new() })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report =
        EvalReport { dataset_id: dataset_id.into(), model_id: model_id.into(), color_correction, images, means: BTreeMap::new() };
    report.recompute_means();
    Ok(report)
}

/// Which network of a checkpoint to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Specialist,
    Generalist,
    Bicubic,
}

/// Loads `(lr, hr, id)` triples of a manifest; ids are the LR file stems.
pub fn load_manifest_triples(manifest_path: &Path) -> Result<Vec<(ImageTensor, ImageTensor, String)>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let pairs = manifest.load_pairs(base)?;
    Ok(pairs
        .into_iter()
        .zip(&manifest.entries)
        .map(|((lr, hr), e)| (lr, hr, e.lr_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()))
        .collect())
}

/// Evaluates one network of a checkpoint on a manifest.
pub fn evaluate(checkpoint: Option<&Path>, manifest_path: &Path, role: Role, color_correction: bool) -> Result<EvalReport> {
    let data = load_manifest_triples(manifest_path)?;
    let dataset_id = manifest_path.display().to_string();
    match (role, checkpoint) {
        (Role::Bicubic, _) => {
            let scale = Manifest::load(manifest_path)?.scale;
            evaluate_model(&BicubicUpsampler { scale }, &data, &dataset_id, "bicubic", color_correction)
        }
        (_, None) => Err(PddError::InvalidInput("a checkpoint is required for model evaluation".into())),
        (role, Some(path)) => {
            let pair = Checkpoint::load(path)?.pair;
            let (model, name) = match role {
                Role::Specialist => (&pair.specialist, "specialist"),
                _ => (&pair.generalist, "generalist"),
            };
            evaluate_model(model, &data, &dataset_id, &format!("{}#{name}", path.display()), color_correction)
        }
    }
}

/// Outcome of [`domain_gap_analysis`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    pub tap: String,
    /// `KL(labeled ‖ unlabeled)` of the descriptor Gaussians.
    pub kl: f64,
    pub labeled_points: Vec<[f64; 2]>,
    pub unlabeled_points: Vec<[f64; 2]>,
    /// Fraction of total variance captured by each of the two components.
    pub explained_variance: [f64; 2],
}

/// Minimum number of images per set.
pub const MIN_GAP_IMAGES: usize = 8;

/// Fits Gaussians to pooled `tap` descriptors of two prediction sets, reports
/// `KL(labeled ‖ unlabeled)` and a joint two-component PCA projection.
pub fn domain_gap_analysis(labeled: &[ImageTensor], unlabeled: &[ImageTensor], ex: &FeatureExtractor, tap: &str) -> Result<DomainGap> {
    if labeled.len() < MIN_GAP_IMAGES || unlabeled.len() < MIN_GAP_IMAGES {
        return Err(PddError::InvalidInput(format!(
            "domain gap analysis needs at least {MIN_GAP_IMAGES} images per set, got {} and {}",
            labeled.len(),
            unlabeled.len()
        )));
    }
    let ex = if ex.taps().iter().any(|t| t == tap) { ex.clone() } else { ex.clone().with_taps(&[tap])? };
    let describe = |imgs: &[ImageTensor]| -> Result<Vec<Vec<f64>>> {
        imgs.iter().map(|img| pooled_descriptor(ex.extract(img)?.get(tap)?)).collect()
    };
    let dl = describe(labeled)?;
    let du = describe(unlabeled)?;
    let kl = kl_gaussian(&with_ridge(GaussianStats::fit(&dl)?), &with_ridge(GaussianStats::fit(&du)?))?;

    let all: Vec<&Vec<f64>> = dl.iter().chain(&du).collect();
    let d = all[0].len();
    let n = all.len();
    let mut x = DMatrix::from_fn(n, d, |i, j| all[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v: DVector<f64> = eig.eigenvectors.column(k).into_owned();
        // deterministic sign: largest-magnitude entry positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        comps.push((v, eig.eigenvalues[k].max(0.0)));
    }
    while comps.len() < 2 {
        comps.push((DVector::zeros(d), 0.0));
    }
    let project = |i: usize| -> [f64; 2] {
        let row = x.row(i);
        [row.dot(&comps[0].0.transpose()), row.dot(&comps[1].0.transpose())]
    };
    let frac = |v: f64| if total > 0.0 { v / total } else { 0.0 };
    Ok(DomainGap {
        tap: tap.to_string(),
        kl,
        labeled_points: (0..dl.len()).map(project).collect(),
        unlabeled_points: (dl.len()..n).map(project).collect(),
        explained_variance: [frac(comps[0].1), frac(comps[1].1)],
    })
}

/// Super-resolves both input sets with `model`, then runs [`domain_gap_analysis`].
pub fn model_domain_gap<M: SrModel + ?Sized>(
    model: &M,
    labeled_lr: &[ImageTensor],
    unlabeled_lr: &[ImageTensor],
    ex: &FeatureExtractor,
    tap: &str,
) -> Result<DomainGap> {
    let l = labeled_lr.iter().map(|x| model.upscale(x)).collect::<Result<Vec<_>>>()?;
    let u = unlabeled_lr.iter().map(|x| model.upscale(x)).collect::<Result<Vec<_>>>()?;
    domain_gap_analysis(&l, &u, ex, tap)
}

/// Scatter plot of one or more projections (`(label, gap)`), one panel each.
pub fn projection_svg(panels: &[(&str, &DomainGap)]) -> String {
    const W: f64 = 320.0;
    const H: f64 = 320.0;
    const PAD: f64 = 28.0;
    let width = W * panels.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="12">"#, H + 24.0);
    let _ = writeln!(s, r#"<text x="6" y="16">PCA projection (substitute for the original embedding) of pooled features</text>"#);
    for (p, (label, gap)) in panels.iter().enumerate() {
        let ox = p as f64 * W;
        let pts: Vec<&[f64; 2]> = gap.labeled_points.iter().chain(&gap.unlabeled_points).collect();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for q in &pts {
            x0 = x0.min(q[0]);
            x1 = x1.max(q[0]);
            y0 = y0.min(q[1]);
            y1 = y1.max(q[1]);
        }
        let sx = if x1 > x0 { (W - 2.0 * PAD) / (x1 - x0) } else { 1.0 };
        let sy = if y1 > y0 { (H - 2.0 * PAD) / (y1 - y0) } else { 1.0 };
        let _ = writeln!(s, r##"<g transform="translate({ox},24)"><rect x="1" y="1" width="{}" height="{}" fill="none" stroke="#999"/>"##, W - 2.0, H - 2.0);
        let _ = writeln!(s, r#"<text x="{PAD}" y="18">{label} (KL {:.3})</text>"#, gap.kl);
        for (set, color) in [(&gap.labeled_points, "#1f77b4"), (&gap.unlabeled_points, "#d62728")] {
            for q in set {
                let cx = PAD + (q[0] - x0) * sx;
                let cy = H - PAD - (q[1] - y0) * sy;
                let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#);
            }
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
