use std::cell::RefCell;

use pdd::corpus::procedural_corpus;
use pdd::features::{gram, FeatureExtractor, GramMatrix};
use pdd::imaging::{images_to_tensor, ImageTensor};
use pdd::losses::*;
use pdd::models::{Critic, Discriminator, DiscriminatorConfig, PredictionQuad};
use pdd::params::Bound;
use pdd::PddError;
use pdd_autograd::{Graph, Real, Tensor, Var};
use proptest::prelude::*;

fn chw(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(&[c, h, w], data).unwrap()
}

/// Brute-force softmax cross-entropy per position, averaged over positions.
fn ce_oracle(c: usize, hw: usize, dg: &[f64], ds: &[f64]) -> f64 {
    let mut total = 0.0;
    for pos in 0..hw {
        let col = |d: &[f64]| (0..c).map(|k| d[k * hw + pos]).collect::<Vec<_>>();
        let (a, b) = (col(dg), col(ds));
        let za: f64 = a.iter().map(|v| v.exp()).sum();
        let zb: f64 = b.iter().map(|v| v.exp()).sum();
        total -= (0..c).map(|k| a[k].exp() / za * (b[k].exp() / zb).ln()).sum::<f64>();
    }
    total / hw as f64
}

#[test]
fn ce_uniform_is_ln_c() {
    let d = chw(4, 2, 2, vec![0.7; 16]);
    let v = r_intra(&[d.clone()], &[d], IntraMeasure::CrossEntropy, 1.0).unwrap();
    assert!((v - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn ce_two_channel_value() {
    let dg = chw(2, 1, 1, vec![1.0, 0.0]);
    let ds = chw(2, 1, 1, vec![0.0, 1.0]);
    let v = r_intra(&[dg], &[ds], IntraMeasure::CrossEntropy, 1.0).unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let closed = -(sig(1.0) * sig(-1.0).ln() + sig(-1.0) * sig(1.0).ln());
    assert!((v - closed).abs() < 1e-12);
    assert!((v - ce_oracle(2, 1, &[1.0, 0.0], &[0.0, 1.0])).abs() < 1e-12);
    assert!((v - 1.044320).abs() < 1e-6, "{v}");
}

#[test]
fn ce_needs_two_channels() {
    let d = chw(1, 2, 2, vec![0.0; 4]);
    assert!(matches!(r_intra(&[d.clone()], &[d], IntraMeasure::CrossEntropy, 1.0), Err(PddError::InvalidInput(_))));
}

#[test]
fn high_temperature_flattens_ce() {
    let dg = chw(3, 1, 2, vec![1.0, 5.0, 0.0, 2.0, 3.0, 0.5]);
    let ds = chw(3, 1, 2, vec![0.0, 1.0, 4.0, 0.0, 2.0, 1.0]);
    let v = r_intra(&[dg], &[ds], IntraMeasure::CrossEntropy, 1e6).unwrap();
    assert!((v - 3f64.ln()).abs() < 1e-5);
}

#[test]
fn intra_sums_over_taps() {
    let a = chw(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let b = chw(2, 1, 2, vec![0.0, 2.0, 1.0, 0.0]);
    let one = r_intra(&[a.clone()], &[b.clone()], IntraMeasure::L1, 1.0).unwrap();
    assert!((one - (1.0 + 0.0 + 2.0 + 4.0) / 4.0).abs() < 1e-12);
    let two = r_intra(&[a.clone(), a], &[b.clone(), b], IntraMeasure::L1, 1.0).unwrap();
    assert!((two - 2.0 * one).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ce_matches_oracle_and_gibbs(dg in prop::collection::vec(0.0f64..3.0, 3 * 4), ds in prop::collection::vec(0.0f64..3.0, 3 * 4)) {
        let v = r_intra(&[chw(3, 2, 2, dg.clone())], &[chw(3, 2, 2, ds.clone())], IntraMeasure::CrossEntropy, 1.0).unwrap();
        prop_assert!((v - ce_oracle(3, 4, &dg, &ds)).abs() < 1e-10);
        let entropy = r_intra(&[chw(3, 2, 2, dg.clone())], &[chw(3, 2, 2, dg)], IntraMeasure::CrossEntropy, 1.0).unwrap();
        prop_assert!(v >= entropy - 1e-12);
    }

    #[test]
    fn ce_shift_invariant(dg in prop::collection::vec(0.0f64..3.0, 4), ds in prop::collection::vec(0.0f64..3.0, 4), k in -10.0f64..10.0) {
        let base = r_intra(&[chw(4, 1, 1, dg.clone())], &[chw(4, 1, 1, ds.clone())], IntraMeasure::CrossEntropy, 1.0).unwrap();
        let shifted_s: Vec<f64> = ds.iter().map(|v| v + k).collect();
        let shifted_g: Vec<f64> = dg.iter().map(|v| v + k).collect();
        let a = r_intra(&[chw(4, 1, 1, dg)], &[chw(4, 1, 1, shifted_s)], IntraMeasure::CrossEntropy, 1.0).unwrap();
        let b = r_intra(&[chw(4, 1, 1, shifted_g)], &[chw(4, 1, 1, ds)], IntraMeasure::CrossEntropy, 1.0).unwrap();
        prop_assert!((a - base).abs() < 1e-6 && (b - base).abs() < 1e-6);
    }

    #[test]
    fn l1_zero_iff_equal(a in prop::collection::vec(0.0f64..1.0, 8), b in prop::collection::vec(0.0f64..1.0, 8)) {
        let same = r_intra(&[chw(2, 2, 2, a.clone())], &[chw(2, 2, 2, a.clone())], IntraMeasure::L1, 1.0).unwrap();
        prop_assert_eq!(same, 0.0);
        let v = r_intra(&[chw(2, 2, 2, a.clone())], &[chw(2, 2, 2, b.clone())], IntraMeasure::L1, 1.0).unwrap();
        prop_assert_eq!(v == 0.0, a == b);
    }

    #[test]
    fn r_inter_symmetric(a in prop::collection::vec(-1.0f64..1.0, 9), b in prop::collection::vec(-1.0f64..1.0, 9)) {
        let ga = GramMatrix { c: 3, data: a, normalizer: 1 };
        let gb = GramMatrix { c: 3, data: b, normalizer: 1 };
        let ab = r_inter(&[ga.clone()], &[gb.clone()]).unwrap();
        prop_assert_eq!(ab, r_inter(&[gb], &[ga.clone()]).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(r_inter(&[ga.clone()], &[ga]).unwrap(), 0.0);
    }
}

#[test]
fn r_inter_toy_and_errors() {
    let a = GramMatrix { c: 2, data: vec![3.0, 0.0, 0.0, 4.0], normalizer: 1 };
    let z = GramMatrix { c: 2, data: vec![0.0; 4], normalizer: 1 };
    assert_eq!(r_inter(&[a.clone()], &[z.clone()]).unwrap(), 5.0);
    assert_eq!(r_inter(&[a.clone(), a.clone()], &[z.clone(), z.clone()]).unwrap(), 10.0);
    let big = GramMatrix { c: 3, data: vec![0.0; 9], normalizer: 1 };
    assert!(matches!(r_inter(&[a.clone()], &[big]), Err(PddError::InvalidInput(_))));
    assert!(matches!(r_inter(&[a], &[]), Err(PddError::InvalidInput(_))));
}

#[test]
fn inter_distance_is_gram_of_difference() {
    let ex = FeatureExtractor::random(1);
    let imgs = procedural_corpus(2, 16, 16, 4).unwrap();
    let (fs, fg) = (ex.extract(&imgs[0]).unwrap(), ex.extract(&imgs[1]).unwrap());
    let d = inter_distance(&fs, &fg).unwrap();
    for ((_, a), ((_, b), g)) in fs.maps.iter().zip(fg.maps.iter().zip(&d)) {
        let diff = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()).unwrap();
        let oracle = gram(&diff).unwrap();
        assert!(oracle.data.iter().zip(&g.data).all(|(x, y)| (x - y).abs() < 1e-9));
    }
    let intra = intra_distance(&fs, &fg).unwrap();
    assert_eq!(intra.len(), 3);
    assert!(intra.iter().all(|t| t.data().iter().all(|&v| v >= 0.0)));
}

#[test]
fn wavelet_constant_offset() {
    let (c, delta) = (0.3, 0.125);
    let a = ImageTensor::filled(4, 6, [c; 3]).unwrap();
    let b = ImageTensor::filled(4, 6, [c + delta; 3]).unwrap();
    let v = wavelet_loss(&a, &b, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((v - 2.0 * delta).abs() < 1e-12, "{v}");
    assert!(wavelet_loss(&a, &b, &[0.0, 1.0, 1.0, 1.0]).unwrap().abs() < 1e-12);
    assert_eq!(wavelet_loss(&a, &a, &[1.0; 4]).unwrap(), 0.0);
    let odd = ImageTensor::filled(5, 6, [c; 3]).unwrap();
    assert!(wavelet_loss(&odd, &odd, &[1.0; 4]).is_err());
}

#[test]
fn wavelet_detail_band_oracle() {
    // one 2x2 block [[1, 0], [0, 0]] → every orthonormal subband coefficient is ±1/2
    let a = ImageTensor::from_fn(2, 2, 1, |y, x, _| if y == 0 && x == 0 { 1.0 } else { 0.0 }).unwrap();
    let z = ImageTensor::from_fn(2, 2, 1, |_, _, _| 0.0).unwrap();
    for s in 0..4 {
        let mut omega = [0.0; 4];
        omega[s] = 1.0;
        assert!((wavelet_loss(&a, &z, &omega).unwrap() - 0.5).abs() < 1e-12);
    }
}

#[test]
fn perceptual_zero_on_identity_and_weighted() {
    let ex = FeatureExtractor::random(0);
    let imgs = procedural_corpus(2, 16, 16, 9).unwrap();
    assert_eq!(perceptual_loss(&imgs[0], &imgs[0], &ex, &[]).unwrap(), 0.0);
    let all = perceptual_loss(&imgs[0], &imgs[1], &ex, &[]).unwrap();
    let parts: f64 = (0..3)
        .map(|i| {
            let mut w = vec![0.0; 3];
            w[i] = 1.0;
            perceptual_loss(&imgs[0], &imgs[1], &ex, &w).unwrap()
        })
        .sum();
    assert!(all > 0.0 && (all - parts).abs() < 1e-9 * all);
}

#[test]
fn gan_spot_values() {
    let z = gan_losses_from_logits(Some(&[0.0]), &[0.0], true).unwrap();
    assert!((z.generator - 2f64.ln()).abs() < 1e-12);
    assert!((z.discriminator.unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    let v = gan_losses_from_logits(Some(&[1.0]), &[-1.0], true).unwrap();
    let softplus = |x: f64| (1.0 + x.exp()).ln();
    assert!((v.discriminator.unwrap() - 2.0 * softplus(-1.0)).abs() < 1e-12);
    assert!((v.discriminator.unwrap() - 0.6265).abs() < 1e-4);
    assert!((v.generator - softplus(1.0)).abs() < 1e-12);
    assert_eq!(gan_losses_from_logits(None, &[0.3], false).unwrap().discriminator, None);
    assert!(matches!(gan_losses_from_logits(None, &[0.3], true), Err(PddError::InvalidInput(_))));
    assert!(gan_losses_from_logits(None, &[], false).is_err());
}

/// Critic that remembers what it was shown and scores the mean intensity.
#[derive(Default)]
struct Recorder {
    seen: RefCell<Vec<Vec<f64>>>,
}

impl Critic for Recorder {
    fn bind<T: Real>(&self, _g: &mut Graph<T>, _trainable: bool) -> pdd::Result<Bound> {
        Ok(pdd::params::ParamStore::new().bind(_g, false))
    }

    fn logits<T: Real>(&self, g: &mut Graph<T>, _bound: &Bound, x: Var) -> pdd::Result<Var> {
        self.seen.borrow_mut().push(g.value(x).to_f64_vec());
        Ok(g.mean(x))
    }
}

fn quad() -> PredictionQuad {
    let mut imgs = procedural_corpus(4, 16, 16, 31).unwrap();
    PredictionQuad { yg_l: imgs.pop().unwrap(), ys_l: imgs.pop().unwrap(), yg_u: imgs.pop().unwrap(), ys_u: imgs.pop().unwrap() }
}

#[test]
fn unlabeled_adversarial_term_scores_specialist_prediction() {
    let q = quad();
    let rec = Recorder::default();
    let w = LossWeights { lambda_intra: 0.0, lambda_inter: 0.0, lambda_gan: 1.0, ..LossWeights::default() };
    let v = unsupervised_loss(&q, &rec, &w, &FeatureExtractor::random(0)).unwrap();
    let seen = rec.seen.borrow();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0], images_to_tensor::<f64>(std::slice::from_ref(&q.ys_u)).unwrap().to_f64_vec());
    let mean = q.ys_u.data().iter().sum::<f64>() / q.ys_u.data().len() as f64;
    assert!((v - (1.0 + (-mean).exp()).ln()).abs() < 1e-9);
}

#[test]
fn unlabeled_total_is_weighted_sum() {
    let q = quad();
    let ex = FeatureExtractor::random(0);
    let d = Discriminator::new(&DiscriminatorConfig { channels: 4, spectral_norm: true }, 0).unwrap();
    let only = |li: f64, le: f64, lg: f64| {
        let w = LossWeights { lambda_intra: li, lambda_inter: le, lambda_gan: lg, ..LossWeights::default() };
        unsupervised_loss(&q, &d, &w, &ex).unwrap()
    };
    let (a, b, c) = (only(1.0, 0.0, 0.0), only(0.0, 1.0, 0.0), only(0.0, 0.0, 1.0));
    assert!(a > 0.0 && b > 0.0 && c > 0.0);
    assert!((only(2.0, 0.5, 0.1) - (2.0 * a + 0.5 * b + 0.1 * c)).abs() < 1e-9);

    let fs_u = ex.extract(&q.ys_u).unwrap();
    let fg_u = ex.extract(&q.yg_u).unwrap();
    let fs_l = ex.extract(&q.ys_l).unwrap();
    let fg_l = ex.extract(&q.yg_l).unwrap();
    let ri = r_intra(&intra_distance(&fg_l, &fg_u).unwrap(), &intra_distance(&fs_l, &fs_u).unwrap(), IntraMeasure::CrossEntropy, 1.0).unwrap();
    let re = r_inter(&inter_distance(&fs_u, &fg_u).unwrap(), &inter_distance(&fs_l, &fg_l).unwrap()).unwrap();
    assert!((ri - a).abs() < 1e-9 * a);
    assert!((re - b).abs() < 1e-9 * b);
}

#[test]
fn unlabeled_rejects_trainable_generalist() {
    let q = quad();
    let ex = FeatureExtractor::random(0);
    let rec = Recorder::default();
    let w = LossWeights::default();
    let mut g = Graph::<f64>::new();
    let exb = ex.bind(&mut g);
    let cb = rec.bind(&mut g, false).unwrap();
    let ctx = LossCtx { extractor: &ex, extractor_bound: &exb, critic: &rec, critic_bound: &cb, weights: &w };
    let mut t = |img: &ImageTensor, grad: bool| g.leaf(images_to_tensor(std::slice::from_ref(img)).unwrap(), grad);
    let qv = QuadVars { ys_u: t(&q.ys_u, true), yg_u: t(&q.yg_u, true), ys_l: t(&q.ys_l, true), yg_l: t(&q.yg_l, false) };
    let f: Vec<Vec<Var>> = [qv.ys_u, qv.yg_u, qv.ys_l, qv.yg_l].iter().map(|&v| ctx.features(&mut g, v).unwrap()).collect();
    let err = ctx.unlabeled(&mut g, &qv, &f[0], &f[1], &f[2], &f[3]).unwrap_err();
    assert!(matches!(err, PddError::InvalidState(_)));
}

#[test]
fn supervised_and_naive_losses() {
    let q = quad();
    let ex = FeatureExtractor::random(0);
    let rec = Recorder::default();
    let w = LossWeights { alpha_gan: 0.0, ..LossWeights::default() };
    assert_eq!(supervised_loss(&q.ys_l, &q.ys_l, &rec, &w, &ex).unwrap(), 0.0);
    let s = supervised_loss(&q.ys_l, &q.yg_l, &rec, &w, &ex).unwrap();
    let expect = wavelet_loss(&q.ys_l, &q.yg_l, &w.omega).unwrap() + perceptual_loss(&q.ys_l, &q.yg_l, &ex, &[]).unwrap();
    assert!((s - expect).abs() < 1e-9);

    let y_l = procedural_corpus(1, 16, 16, 77).unwrap().remove(0);
    let unl = supervised_loss(&q.ys_u, &q.yg_u, &rec, &w, &ex).unwrap();
    let lab = supervised_loss(&q.ys_l, &y_l, &rec, &w, &ex).unwrap();
    let nd = |l: f64| naive_distill_loss(&q, &y_l, &rec, &LossWeights { lambda_nd: l, ..w.clone() }, &ex).unwrap();
    assert!((nd(0.0) - unl).abs() < 1e-12);
    assert!((nd(0.5) - (unl + 0.5 * lab)).abs() < 1e-9);
    assert!(rec.seen.borrow().is_empty());
}

#[test]
fn shape_mismatch_is_reported() {
    let a = ImageTensor::filled(8, 8, [0.1; 3]).unwrap();
    let b = ImageTensor::filled(8, 10, [0.1; 3]).unwrap();
    assert!(matches!(wavelet_loss(&a, &b, &[1.0; 4]), Err(PddError::InvalidShape(_))));
    let d1 = chw(2, 1, 1, vec![0.0; 2]);
    let d2 = chw(3, 1, 1, vec![0.0; 3]);
    assert!(r_intra(&[d1], &[d2], IntraMeasure::L1, 1.0).is_err());
}

#[test]
fn weights_config_rejects_unknown_keys() {
    let w: LossWeights = serde_json::from_str(&serde_json::to_string(&LossWeights::default()).unwrap()).unwrap();
    assert_eq!(w, LossWeights::default());
    let mut v = serde_json::to_value(LossWeights::default()).unwrap();
    v["lambda_typo"] = 1.0.into();
    assert!(serde_json::from_value::<LossWeights>(v).is_err());
}

#[test]
fn gradcheck_suite_passes() {
    let rows = pdd::gradcheck::run_suite(0).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(r.pass, "{}", pdd::gradcheck::format_table(&rows));
        assert_eq!(r.coords, 8 * 8 * 3);
    }
}
