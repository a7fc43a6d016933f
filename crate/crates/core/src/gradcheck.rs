//! Analytic gradients of the training losses against central finite differences.

use pdd_autograd::{Graph, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::features::FeatureExtractor;
use crate::losses::{self, IntraMeasure, LossWeights};
use crate::models::{Critic, Discriminator, DiscriminatorConfig};
use crate::seeding::rng_for;
use crate::Result;

pub const SIDE: usize = 8;
pub const CHANNELS: usize = 3;
/// Small enough that probes rarely straddle the ReLU and absolute-value kinks
/// inside the feature distances.
pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;
/// Fraction of coordinates that must be within [`REL_TOL`].
pub const PASS_FRACTION: f64 = 0.99;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub coords: usize,
    pub within_tol: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `d f / d x` from backprop with central differences at every coordinate of `x`.
pub fn check<F>(name: &str, x: &Tensor<f64>, f: F) -> Result<GradcheckRow>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut within = 0;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * STEP);
        let e = relative_error(a, numeric);
        worst = worst.max(e);
        if e <= REL_TOL {
            within += 1;
        }
    }
    let coords = analytic.len();
    Ok(GradcheckRow {
        name: name.to_string(),
        coords,
        within_tol: within,
        max_rel_err: worst,
        pass: within as f64 >= PASS_FRACTION * coords as f64,
    })
}

fn random_image(rng: &mut impl Rng) -> Tensor<f64> {
    let data = (0..SIDE * SIDE * CHANNELS).map(|_| rng.random::<f64>()).collect();
    Tensor::new(&[1, CHANNELS, SIDE, SIDE], data).expect("fixed shape")
}

/// Runs every loss check on random `8x8x3` inputs; the input differentiated is the
/// specialist's unlabeled prediction (or the prediction, for labeled losses).
pub fn run_suite(seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rng = rng_for(seed, 0);
    let ex = FeatureExtractor::random(seed).with_taps(&["block1_conv2", "block2_conv2"])?;
    let critic = Discriminator::new(&DiscriminatorConfig { channels: 4, spectral_norm: true }, seed)?;
    let x = random_image(&mut rng);
    let [yg_u, ys_l, yg_l, gt] = [(); 4].map(|_| random_image(&mut rng));

    let features = |g: &mut Graph<f64>, v: Var| -> Result<Vec<Var>> {
        let b = ex.bind(g);
        ex.forward(g, &b, v)
    };
    // features of the three fixed predictions, rebuilt inside each graph
    let fixed = |g: &mut Graph<f64>| -> Result<[Vec<Var>; 3]> {
        let mut out = Vec::with_capacity(3);
        for t in [&yg_u, &ys_l, &yg_l] {
            let v = g.constant(t.clone());
            out.push(features(g, v)?);
        }
        Ok(out.try_into().expect("three entries"))
    };

    let mut rows = Vec::new();
    for (name, measure) in [("r_intra_ce", IntraMeasure::CrossEntropy), ("r_intra_l1", IntraMeasure::L1)] {
        rows.push(check(name, &x, |g, v| {
            let [fg_u, fs_l, fg_l] = fixed(g)?;
            let fs_u = features(g, v)?;
            let d_g = losses::intra_distance_graph(g, &fg_l, &fg_u)?;
            let d_s = losses::intra_distance_graph(g, &fs_l, &fs_u)?;
            losses::r_intra_graph(g, &d_g, &d_s, measure, 1.0)
        })?);
    }
    rows.push(check("r_inter", &x, |g, v| {
        let [fg_u, fs_l, fg_l] = fixed(g)?;
        let fs_u = features(g, v)?;
        let d_u = losses::inter_distance_graph(g, &fs_u, &fg_u)?;
        let d_l = losses::inter_distance_graph(g, &fs_l, &fg_l)?;
        losses::r_inter_graph(g, &d_u, &d_l)
    })?);
    rows.push(check("wavelet", &x, |g, v| {
        let t = g.constant(gt.clone());
        losses::wavelet_loss_graph(g, v, t, &[1.0, 0.5, 0.5, 0.25])
    })?);
    rows.push(check("perceptual", &x, |g, v| {
        let t = g.constant(gt.clone());
        let fp = features(g, v)?;
        let ft = features(g, t)?;
        losses::perceptual_loss_graph(g, &fp, &ft, &LossWeights::default())
    })?);
    rows.push(check("gan_generator", &x, |g, v| {
        let b = critic.bind(g, false)?;
        let logits = critic.logits(g, &b, v)?;
        Ok(losses::gan_generator_graph(g, logits))
    })?);
    Ok(rows)
}

/// Plain-text table, one row per check.
pub fn format_table(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<16} {:>7} {:>10} {:>12}  result\n", "loss", "coords", "within", "max_rel_err");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>7} {:>10} {:>12.3e}  {}\n",
            r.name,
            r.coords,
            r.within_tol,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let row = check("square", &x, |g, v| {
            let s = g.square(v);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(row.pass && row.max_rel_err < 1e-6, "{row:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        // relu's kink at 0 is hit exactly at every coordinate
        let x = Tensor::new(&[4], vec![0.0; 4]).unwrap();
        let row = check("relu_kink", &x, |g, v| {
            let r = g.relu(v);
            Ok(g.sum(r))
        })
        .unwrap();
        assert!(!row.pass);
    }
}
