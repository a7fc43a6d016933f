//! Distillation, reconstruction and adversarial objectives.
//!
//! Every loss exists as a graph builder (`*_graph`, differentiable, used by the
//! trainer and the gradient checks) and, where useful, as a plain value function
//! on images or feature maps.

use pdd_autograd::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::features::{gram, FeatureExtractor, FeaturePack, GramMatrix};
use crate::imaging::{images_to_tensor, ImageTensor};
use crate::models::Critic;
use crate::params::Bound;
use crate::{PddError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraMeasure {
    CrossEntropy,
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Wavelet reconstruction weight in the labeled loss.
    pub alpha_wv: f64,
    /// Perceptual weight in the labeled loss.
    pub alpha_vgg: f64,
    /// Adversarial weight in the labeled loss.
    pub alpha_gan: f64,
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    /// Adversarial weight on the unlabeled specialist prediction.
    pub lambda_gan: f64,
    /// Weight of the labeled term in naive distillation.
    pub lambda_nd: f64,
    /// Weights of the LL, LH, HL, HH subbands.
    pub omega: [f64; 4],
    pub intra_measure: IntraMeasure,
    /// Softmax temperature of the cross-entropy consistency.
    #[serde(default = "one")]
    pub temperature: f64,
    /// Per-tap perceptual weights; empty means 1 for every tap.
    #[serde(default)]
    pub vgg_tap_weights: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_wv: 1.0,
            alpha_vgg: 1.0,
            alpha_gan: 0.1,
            lambda_intra: 1.0,
            lambda_inter: 1.0,
            lambda_gan: 0.05,
            lambda_nd: 1.0,
            omega: [1.0; 4],
            intra_measure: IntraMeasure::CrossEntropy,
            temperature: 1.0,
            vgg_tap_weights: Vec::new(),
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha_wv: 0.0,
            alpha_vgg: 0.0,
            alpha_gan: 0.0,
            lambda_intra: 0.0,
            lambda_inter: 0.0,
            lambda_gan: 0.0,
            lambda_nd: 0.0,
            omega: [0.0; 4],
            ..Self::default()
        }
    }

    pub fn validate(&self, pdd_active: bool) -> Result<()> {
        let all = [
            self.alpha_wv,
            self.alpha_vgg,
            self.alpha_gan,
            self.lambda_intra,
            self.lambda_inter,
            self.lambda_gan,
            self.lambda_nd,
        ];
        if all.iter().chain(&self.omega).chain(&self.vgg_tap_weights).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(PddError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PddError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if pdd_active && self.lambda_intra == 0.0 && self.lambda_inter == 0.0 {
            return Err(PddError::Config("PDD needs lambda_intra > 0 or lambda_inter > 0".into()));
        }
        Ok(())
    }

    fn tap_weight(&self, i: usize) -> f64 {
        self.vgg_tap_weights.get(i).copied().unwrap_or(if self.vgg_tap_weights.is_empty() { 1.0 } else { 0.0 })
    }

    /// Whether any adversarial term is active.
    pub fn uses_gan(&self) -> bool {
        self.alpha_gan > 0.0 || self.lambda_gan > 0.0
    }
}

fn check_pairs<T: Real>(g: &Graph<T>, what: &str, a: &[Var], b: &[Var]) -> Result<()> {
    if a.len() != b.len() {
        return Err(PddError::InvalidShape(format!("{what}: {} vs {} taps", a.len(), b.len())));
    }
    for (&x, &y) in a.iter().zip(b) {
        if g.value(x).shape() != g.value(y).shape() {
            return Err(PddError::InvalidShape(format!(
                "{what}: {:?} vs {:?}",
                g.value(x).shape(),
                g.value(y).shape()
            )));
        }
    }
    Ok(())
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

fn sum_all<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(zero(g)),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `w₁·a₁ + w₂·a₂ + …`, skipping zero weights.
fn weighted<T: Real>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let scaled: Vec<Var> = terms.iter().filter(|(w, _)| *w != 0.0).map(|&(w, v)| g.scale(v, w)).collect();
    sum_all(g, &scaled)
}

/// Per-tap elementwise `|a − b|` (intra-model distance).
pub fn intra_distance_graph<T: Real>(g: &mut Graph<T>, fa: &[Var], fb: &[Var]) -> Result<Vec<Var>> {
    check_pairs(g, "intra distance", fa, fb)?;
    fa.iter()
        .zip(fb)
        .map(|(&a, &b)| {
            let d = g.sub(a, b)?;
            Ok(g.abs(d))
        })
        .collect()
}

/// Consistency of intra-model distances, summed over taps and averaged over batch and positions.
///
/// Cross-entropy: `−Σ_c softmax(d_G/τ) · log softmax(d_S/τ)` per position; `d_G` is the target.
pub fn r_intra_graph<T: Real>(
    g: &mut Graph<T>,
    d_g: &[Var],
    d_s: &[Var],
    measure: IntraMeasure,
    temperature: f64,
) -> Result<Var> {
    check_pairs(g, "r_intra", d_g, d_s)?;
    let mut terms = Vec::with_capacity(d_g.len());
    for (&dg, &ds) in d_g.iter().zip(d_s) {
        let (_, c, _, _) = g.value(dg).dims4()?;
        let term = match measure {
            IntraMeasure::CrossEntropy => {
                if c < 2 {
                    return Err(PddError::InvalidInput("cross-entropy over fewer than 2 channels".into()));
                }
                let (dg, ds) = if temperature == 1.0 {
                    (dg, ds)
                } else {
                    (g.scale(dg, 1.0 / temperature), g.scale(ds, 1.0 / temperature))
                };
                let p = g.softmax_channels(dg)?;
                let logq = g.log_softmax_channels(ds)?;
                let prod = g.mul(p, logq)?;
                let m = g.mean(prod);
                // the mean runs over channels too; undo that part of the average
                g.scale(m, -(c as f64))
            }
            IntraMeasure::L1 => {
                let d = g.sub(dg, ds)?;
                let a = g.abs(d);
                g.mean(a)
            }
        };
        terms.push(term);
    }
    sum_all(g, &terms)
}

/// Per-tap Gram matrix of `f_S − f_G` (inter-model distance), `[N, c, c]`.
pub fn inter_distance_graph<T: Real>(g: &mut Graph<T>, fs: &[Var], fg: &[Var]) -> Result<Vec<Var>> {
    check_pairs(g, "inter distance", fs, fg)?;
    fs.iter()
        .zip(fg)
        .map(|(&s, &t)| {
            let d = g.sub(s, t)?;
            Ok(g.gram(d)?)
        })
        .collect()
}

/// `Σ_taps ‖Δ_U − Δ_L‖_F`, with the norm taken per batch item and averaged.
pub fn r_inter_graph<T: Real>(g: &mut Graph<T>, d_u: &[Var], d_l: &[Var]) -> Result<Var> {
    check_pairs(g, "r_inter", d_u, d_l)?;
    let mut terms = Vec::with_capacity(d_u.len());
    for (&u, &l) in d_u.iter().zip(d_l) {
        let d = g.sub(u, l)?;
        let n = g.norm_per_sample(d)?;
        terms.push(g.mean(n));
    }
    sum_all(g, &terms)
}

/// `Σ_s ω_s · mean|W_s(pred) − W_s(gt)|` over single-level Haar subbands.
pub fn wavelet_loss_graph<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, omega: &[f64; 4]) -> Result<Var> {
    check_pairs(g, "wavelet loss", &[pred], &[gt])?;
    let (_, c, _, _) = g.value(pred).dims4()?;
    let d = g.sub(pred, gt)?;
    let w = g.haar(d)?;
    let a = g.abs(w);
    let scale: Vec<f64> = omega.iter().flat_map(|&o| std::iter::repeat_n(o, c)).collect();
    let weighted = g.channel_affine(a, &scale, &vec![0.0; 4 * c])?;
    let m = g.mean(weighted);
    // mean over 4 subbands at once; each subband's own mean is 4x larger
    Ok(g.scale(m, 4.0))
}

/// `Σ_taps w_tap · mean|Φ(pred) − Φ(gt)|` on precomputed features.
pub fn perceptual_loss_graph<T: Real>(g: &mut Graph<T>, f_pred: &[Var], f_gt: &[Var], w: &LossWeights) -> Result<Var> {
    let d = intra_distance_graph(g, f_pred, f_gt)?;
    let terms: Vec<(f64, Var)> = d.into_iter().enumerate().map(|(i, v)| (w.tap_weight(i), g.mean(v))).collect();
    weighted(g, &terms)
}

/// Non-saturating generator loss `mean softplus(−D(fake))`.
pub fn gan_generator_graph<T: Real>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    let neg = g.scale(fake_logits, -1.0);
    let sp = g.softplus(neg);
    g.mean(sp)
}

/// Discriminator loss `mean softplus(−D(real)) + mean softplus(D(fake))`.
pub fn gan_discriminator_graph<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let neg = g.scale(real_logits, -1.0);
    let r = g.softplus(neg);
    let r = g.mean(r);
    let f = g.softplus(fake_logits);
    let f = g.mean(f);
    Ok(g.add(r, f)?)
}

/// Frozen extractor and shared critic, both already bound into one graph.
pub struct LossCtx<'a, C> {
    pub extractor: &'a FeatureExtractor,
    pub extractor_bound: &'a Bound,
    pub critic: &'a C,
    pub critic_bound: &'a Bound,
    pub weights: &'a LossWeights,
}

/// Scalar components of a labeled loss `L_L(pred, target)`.
#[derive(Clone, Copy, Debug)]
pub struct LabeledTerms {
    pub wv: Var,
    pub vgg: Var,
    pub gan: Option<Var>,
    pub total: Var,
}

impl<C: Critic> LossCtx<'_, C> {
    pub fn features<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        self.extractor.forward(g, self.extractor_bound, x)
    }

    pub fn gan_generator<T: Real>(&self, g: &mut Graph<T>, fake: Var) -> Result<Var> {
        let logits = self.critic.logits(g, self.critic_bound, fake)?;
        Ok(gan_generator_graph(g, logits))
    }

    /// `α₁·L_wv + α₂·L_vgg + α₃·L_gan(pred)`; features may be passed in to avoid recomputation.
    pub fn labeled<T: Real>(
        &self,
        g: &mut Graph<T>,
        pred: Var,
        target: Var,
        f_pred: Option<&[Var]>,
        f_target: Option<&[Var]>,
    ) -> Result<LabeledTerms> {
        let w = self.weights;
        let wv = wavelet_loss_graph(g, pred, target, &w.omega)?;
        let vgg = if w.alpha_vgg > 0.0 {
            let fp = match f_pred {
                Some(f) => f.to_vec(),
                None => self.features(g, pred)?,
            };
            let ft = match f_target {
                Some(f) => f.to_vec(),
                None => self.features(g, target)?,
            };
            perceptual_loss_graph(g, &fp, &ft, w)?
        } else {
            zero(g)
        };
        let gan = if w.alpha_gan > 0.0 { Some(self.gan_generator(g, pred)?) } else { None };
        let mut terms = vec![(w.alpha_wv, wv), (w.alpha_vgg, vgg)];
        if let Some(v) = gan {
            terms.push((w.alpha_gan, v));
        }
        let total = weighted(g, &terms)?;
        Ok(LabeledTerms { wv, vgg, gan, total })
    }
}

/// Graph handles of the four predictions. `yg_*` must not require gradients.
#[derive(Clone, Copy, Debug)]
pub struct QuadVars {
    pub ys_u: Var,
    pub yg_u: Var,
    pub ys_l: Var,
    pub yg_l: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct UnlabeledTerms {
    pub r_intra: Var,
    pub r_inter: Var,
    pub gan: Option<Var>,
    pub total: Var,
}

impl<C: Critic> LossCtx<'_, C> {
    /// `λ₁·R_intra + λ₂·R_inter + λ₃·L_gan(yS_U)` from per-prediction features.
    #[allow(clippy::too_many_arguments)]
    pub fn unlabeled<T: Real>(
        &self,
        g: &mut Graph<T>,
        quad: &QuadVars,
        fs_u: &[Var],
        fg_u: &[Var],
        fs_l: &[Var],
        fg_l: &[Var],
    ) -> Result<UnlabeledTerms> {
        if g.requires_grad(quad.yg_u) || g.requires_grad(quad.yg_l) {
            return Err(PddError::InvalidState("generalist predictions must be detached".into()));
        }
        let w = self.weights;
        let r_intra = if w.lambda_intra > 0.0 {
            let d_g = intra_distance_graph(g, fg_l, fg_u)?;
            let d_s = intra_distance_graph(g, fs_l, fs_u)?;
            r_intra_graph(g, &d_g, &d_s, w.intra_measure, w.temperature)?
        } else {
            zero(g)
        };
        let r_inter = if w.lambda_inter > 0.0 {
            let d_u = inter_distance_graph(g, fs_u, fg_u)?;
            let d_l = inter_distance_graph(g, fs_l, fg_l)?;
            r_inter_graph(g, &d_u, &d_l)?
        } else {
            zero(g)
        };
        let gan = if w.lambda_gan > 0.0 { Some(self.gan_generator(g, quad.ys_u)?) } else { None };
        let mut terms = vec![(w.lambda_intra, r_intra), (w.lambda_inter, r_inter)];
        if let Some(v) = gan {
            terms.push((w.lambda_gan, v));
        }
        let total = weighted(g, &terms)?;
        Ok(UnlabeledTerms { r_intra, r_inter, gan, total })
    }
}

/// Named scalar losses of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub r_intra: f64,
    pub r_inter: f64,
    pub l_wv: f64,
    pub l_vgg: f64,
    pub l_gan_lab: f64,
    pub l_gan_unlab: f64,
    #[serde(rename = "l_L")]
    pub l_l: f64,
    #[serde(rename = "l_U")]
    pub l_u: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_nd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_disc: Option<f64>,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.r_intra, self.r_inter, self.l_wv, self.l_vgg, self.l_gan_lab, self.l_gan_unlab, self.l_l, self.l_u, self.total]
            .iter()
            .chain(self.l_nd.iter())
            .chain(self.l_disc.iter())
            .all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Value-level wrappers (double precision, no gradients).

fn as_batch(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    match t.shape() {
        &[c, h, w] => Ok(t.clone().reshape(&[1, c, h, w])?),
        &[_, _, _, _] => Ok(t.clone()),
        s => Err(PddError::InvalidShape(format!("expected a c x h x w map, got {s:?}"))),
    }
}

fn pack_pairs<'a>(a: &'a FeaturePack, b: &'a FeaturePack) -> Result<Vec<(&'a Tensor<f64>, &'a Tensor<f64>)>> {
    if a.maps.len() != b.maps.len() {
        return Err(PddError::InvalidShape(format!("{} vs {} taps", a.maps.len(), b.maps.len())));
    }
    a.maps
        .iter()
        .zip(&b.maps)
        .map(|((na, ta), (nb, tb))| {
            if na != nb || ta.shape() != tb.shape() {
                return Err(PddError::InvalidShape(format!("tap {na} {:?} vs {nb} {:?}", ta.shape(), tb.shape())));
            }
            Ok((ta, tb))
        })
        .collect()
}

/// Per-tap `|f_L − f_U|` maps.
pub fn intra_distance(f_l: &FeaturePack, f_u: &FeaturePack) -> Result<Vec<Tensor<f64>>> {
    pack_pairs(f_l, f_u)?
        .into_iter()
        .map(|(a, b)| Ok(Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect())?))
        .collect()
}

/// `R_intra` on per-tap distance maps (`c x h x w` or `N x c x h x w`).
pub fn r_intra(d_g: &[Tensor<f64>], d_s: &[Tensor<f64>], measure: IntraMeasure, temperature: f64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = d_g.iter().map(|t| Ok(g.constant(as_batch(t)?))).collect::<Result<Vec<_>>>()?;
    let b = d_s.iter().map(|t| Ok(g.constant(as_batch(t)?))).collect::<Result<Vec<_>>>()?;
    let v = r_intra_graph(&mut g, &a, &b, measure, temperature)?;
    Ok(g.value(v).item())
}

/// Per-tap `Gram(f_S − f_G)`.
pub fn inter_distance(f_s: &FeaturePack, f_g: &FeaturePack) -> Result<Vec<GramMatrix>> {
    pack_pairs(f_s, f_g)?
        .into_iter()
        .map(|(a, b)| gram(&Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect())?))
        .collect()
}

/// `Σ_taps ‖Δ_U − Δ_L‖_F`.
pub fn r_inter(d_u: &[GramMatrix], d_l: &[GramMatrix]) -> Result<f64> {
    if d_u.len() != d_l.len() {
        return Err(PddError::InvalidInput(format!("{} vs {} taps", d_u.len(), d_l.len())));
    }
    d_u.iter()
        .zip(d_l)
        .map(|(u, l)| {
            if u.c != l.c {
                return Err(PddError::InvalidInput(format!("Gram sizes {} vs {}", u.c, l.c)));
            }
            Ok(u.data.iter().zip(&l.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        })
        .sum()
}

fn image_pair(pred: &ImageTensor, gt: &ImageTensor) -> Result<(Tensor<f64>, Tensor<f64>)> {
    pred.ensure_same_shape(gt, "prediction vs target")?;
    Ok((images_to_tensor(std::slice::from_ref(pred))?, images_to_tensor(std::slice::from_ref(gt))?))
}

pub fn wavelet_loss(pred: &ImageTensor, gt: &ImageTensor, omega: &[f64; 4]) -> Result<f64> {
    let (p, t) = image_pair(pred, gt)?;
    let mut g = Graph::<f64>::new();
    let (p, t) = (g.constant(p), g.constant(t));
    let v = wavelet_loss_graph(&mut g, p, t, omega)?;
    Ok(g.value(v).item())
}

/// `Σ_taps w_tap · mean|Φ(pred) − Φ(gt)|`; `tap_weights` empty means all ones.
pub fn perceptual_loss(pred: &ImageTensor, gt: &ImageTensor, ex: &FeatureExtractor, tap_weights: &[f64]) -> Result<f64> {
    let (p, t) = image_pair(pred, gt)?;
    let mut g = Graph::<f64>::new();
    let bound = ex.bind(&mut g);
    let (p, t) = (g.constant(p), g.constant(t));
    let fp = ex.forward(&mut g, &bound, p)?;
    let ft = ex.forward(&mut g, &bound, t)?;
    let w = LossWeights { vgg_tap_weights: tap_weights.to_vec(), ..LossWeights::default() };
    let v = perceptual_loss_graph(&mut g, &fp, &ft, &w)?;
    Ok(g.value(v).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub generator: f64,
    pub discriminator: Option<f64>,
}

/// Adversarial losses from raw logits; the discriminator loss needs `real`.
pub fn gan_losses_from_logits(real: Option<&[f64]>, fake: &[f64], want_discriminator: bool) -> Result<GanLosses> {
    if fake.is_empty() {
        return Err(PddError::InvalidInput("no fake logits".into()));
    }
    let mut g = Graph::<f64>::new();
    let f = g.constant(Tensor::from_f64(&[fake.len()], fake)?);
    let gen = gan_generator_graph(&mut g, f);
    let discriminator = if want_discriminator {
        let real = real.ok_or_else(|| PddError::InvalidInput("discriminator loss requested without real samples".into()))?;
        let r = g.constant(Tensor::from_f64(&[real.len()], real)?);
        let d = gan_discriminator_graph(&mut g, r, f)?;
        Some(g.value(d).item())
    } else {
        None
    };
    Ok(GanLosses { generator: g.value(gen).item(), discriminator })
}

/// Adversarial losses of `critic` on image batches.
pub fn gan_losses<C: Critic>(critic: &C, real: Option<&[ImageTensor]>, fake: &[ImageTensor], want_discriminator: bool) -> Result<GanLosses> {
    let mut g = Graph::<f64>::new();
    let bound = critic.bind(&mut g, false)?;
    let f = g.constant(images_to_tensor(fake)?);
    let fl = critic.logits(&mut g, &bound, f)?;
    let real_logits = match real {
        Some(r) => {
            let r = g.constant(images_to_tensor(r)?);
            Some(critic.logits(&mut g, &bound, r)?)
        }
        None => None,
    };
    let fake_vals = g.value(fl).to_f64_vec();
    let real_vals = real_logits.map(|v| g.value(v).to_f64_vec());
    gan_losses_from_logits(real_vals.as_deref(), &fake_vals, want_discriminator)
}

/// `L_L(pred, target)` on single images.
pub fn supervised_loss<C: Critic>(pred: &ImageTensor, target: &ImageTensor, critic: &C, w: &LossWeights, ex: &FeatureExtractor) -> Result<f64> {
    let (p, t) = image_pair(pred, target)?;
    let mut g = Graph::<f64>::new();
    let exb = ex.bind(&mut g);
    let cb = critic.bind(&mut g, false)?;
    let ctx = LossCtx { extractor: ex, extractor_bound: &exb, critic, critic_bound: &cb, weights: w };
    let (p, t) = (g.constant(p), g.constant(t));
    let terms = ctx.labeled(&mut g, p, t, None, None)?;
    Ok(g.value(terms.total).item())
}

/// `L_U` on a single-image prediction quadruple.
pub fn unsupervised_loss<C: Critic>(quad: &crate::models::PredictionQuad, critic: &C, w: &LossWeights, ex: &FeatureExtractor) -> Result<f64> {
    quad.ys_u.ensure_same_shape(&quad.yg_u, "unlabeled predictions")?;
    quad.ys_l.ensure_same_shape(&quad.yg_l, "labeled predictions")?;
    let mut g = Graph::<f64>::new();
    let exb = ex.bind(&mut g);
    let cb = critic.bind(&mut g, false)?;
    let ctx = LossCtx { extractor: ex, extractor_bound: &exb, critic, critic_bound: &cb, weights: w };
    let mut leaf = |img: &ImageTensor| -> Result<Var> { Ok(g.constant(images_to_tensor(std::slice::from_ref(img))?)) };
    let q = QuadVars { ys_u: leaf(&quad.ys_u)?, yg_u: leaf(&quad.yg_u)?, ys_l: leaf(&quad.ys_l)?, yg_l: leaf(&quad.yg_l)? };
    let fs_u = ctx.features(&mut g, q.ys_u)?;
    let fg_u = ctx.features(&mut g, q.yg_u)?;
    let fs_l = ctx.features(&mut g, q.ys_l)?;
    let fg_l = ctx.features(&mut g, q.yg_l)?;
    let terms = ctx.unlabeled(&mut g, &q, &fs_u, &fg_u, &fs_l, &fg_l)?;
    Ok(g.value(terms.total).item())
}

/// `L_L(yS_U, yG_U) + λ_nd · L_L(yS_L, y_L)`.
pub fn naive_distill_loss<C: Critic>(
    quad: &crate::models::PredictionQuad,
    y_l: &ImageTensor,
    critic: &C,
    w: &LossWeights,
    ex: &FeatureExtractor,
) -> Result<f64> {
    let unl = supervised_loss(&quad.ys_u, &quad.yg_u, critic, w, ex)?;
    let lab = if w.lambda_nd == 0.0 { 0.0 } else { supervised_loss(&quad.ys_l, y_l, critic, w, ex)? };
    Ok(unl + w.lambda_nd * lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_weight_defaults() {
        let w = LossWeights::default();
        assert_eq!(w.tap_weight(5), 1.0);
        let w = LossWeights { vgg_tap_weights: vec![0.5], ..LossWeights::default() };
        assert_eq!((w.tap_weight(0), w.tap_weight(1)), (0.5, 0.0));
    }

    #[test]
    fn validation() {
        assert!(LossWeights::default().validate(true).is_ok());
        assert!(LossWeights::zero().validate(true).is_err());
        assert!(LossWeights::zero().validate(false).is_ok());
        assert!(LossWeights { alpha_wv: -1.0, ..LossWeights::default() }.validate(false).is_err());
        assert!(LossWeights { temperature: 0.0, ..LossWeights::default() }.validate(false).is_err());
    }
}
