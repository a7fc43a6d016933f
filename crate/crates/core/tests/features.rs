use pdd::archive::Archive;
use pdd::corpus::procedural_corpus;
use pdd::features::*;
use pdd::imaging::ImageTensor;
use pdd::PddError;
use pdd_autograd::Tensor;
use proptest::prelude::*;

fn map(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(&[c, h, w], data).unwrap()
}

#[test]
fn gram_toy_value() {
    let g = gram(&map(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
    assert_eq!(g.c, 2);
    assert_eq!(g.normalizer, 2);
    assert_eq!(g.data, vec![0.5, 0.0, 0.0, 0.5]);
}

#[test]
fn gram_rejects_bad_input() {
    assert!(matches!(gram(&Tensor::new(&[4], vec![0.0; 4]).unwrap()), Err(PddError::InvalidShape(_))));
    assert!(matches!(gram(&map(1, 1, 2, vec![f64::NAN, 0.0])), Err(PddError::InvalidInput(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_scales_quadratically(data in prop::collection::vec(-2.0f64..2.0, 3 * 4 * 5), alpha in -3.0f64..3.0) {
        let f = map(3, 4, 5, data.clone());
        let g = gram(&f).unwrap();
        let gs = gram(&map(3, 4, 5, data.iter().map(|v| v * alpha).collect())).unwrap();
        for (a, b) in g.data.iter().zip(&gs.data) {
            prop_assert!((a * alpha * alpha - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gram_is_symmetric_psd(data in prop::collection::vec(-1.0f64..1.0, 4 * 3 * 3)) {
        let g = gram(&map(4, 3, 3, data)).unwrap();
        let m = g.to_matrix();
        prop_assert!((&m - m.transpose()).abs().max() < 1e-12);
        let eig = m.symmetric_eigen().eigenvalues;
        prop_assert!(eig.iter().all(|&e| e > -1e-10));
    }
}

#[test]
fn random_backbone_shapes() {
    let ex = FeatureExtractor::random(0).with_taps(&["block1_conv2", "block3_conv2"]).unwrap();
    assert_eq!(ex.tap_channels(), vec![16, 64]);
    assert_eq!(ex.min_input_size(), 4);
    let img = ImageTensor::filled(192, 192, [0.2, 0.4, 0.6]).unwrap();
    let f = ex.extract(&img).unwrap();
    assert_eq!(f.get("block1_conv2").unwrap().shape(), &[16, 192, 192]);
    assert_eq!(f.get("block3_conv2").unwrap().shape(), &[64, 48, 48]);
    assert!(f.all_finite());
    assert!(f.get("block2_conv2").is_err());
}

#[test]
fn extraction_is_deterministic_and_seeded() {
    let img = procedural_corpus(1, 32, 32, 3).unwrap().remove(0);
    let a = FeatureExtractor::random(5).extract(&img).unwrap();
    let b = FeatureExtractor::random(5).extract(&img).unwrap();
    let c = FeatureExtractor::random(6).extract(&img).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.maps.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["block2_conv2", "block3_conv2", "block4_conv2"]);
}

#[test]
fn invalid_taps_and_inputs() {
    assert!(matches!(FeatureExtractor::random(0).with_taps(&["block9_conv1"]), Err(PddError::Config(_))));
    assert!(matches!(FeatureExtractor::random(0).with_taps(&["relu3"]), Err(PddError::Config(_))));
    assert!(matches!(FeatureExtractor::random(0).with_taps::<&str>(&[]), Err(PddError::Config(_))));
    let ex = FeatureExtractor::random(0);
    let tiny = ImageTensor::filled(4, 4, [0.5; 3]).unwrap();
    assert!(matches!(ex.extract(&tiny), Err(PddError::InvalidShape(_))));
    let gray = ImageTensor::from_fn(16, 16, 1, |_, _, _| 0.5).unwrap();
    assert!(matches!(ex.extract(&gray), Err(PddError::InvalidInput(_))));
}

#[test]
fn vgg19_loads_torchvision_names() {
    let blocks = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
    let mut archive = Archive::default();
    let (mut idx, mut c_in) = (0, 3);
    for (convs, ch) in blocks {
        for _ in 0..convs {
            let n = ch * c_in * 9;
            let w = (0..n).map(|i| ((i % 7) as f32 - 3.0) * 1e-3).collect();
            archive.insert(format!("features.{idx}.weight"), &[ch, c_in, 3, 3], w);
            archive.insert(format!("features.{idx}.bias"), &[ch], vec![0.01; ch]);
            c_in = ch;
            idx += 2;
        }
        idx += 1;
    }
    let ex = FeatureExtractor::vgg19(&archive).unwrap().with_taps(&["block2_conv2"]).unwrap();
    assert_eq!(ex.tap_channels(), vec![128]);
    let f = ex.extract(&ImageTensor::filled(8, 8, [0.5; 3]).unwrap()).unwrap();
    assert_eq!(f.get("block2_conv2").unwrap().shape(), &[128, 4, 4]);

    let mut broken = Archive::default();
    broken.insert("features.0.weight", &[64, 3, 3, 3], vec![0.0; 64 * 27]);
    assert!(FeatureExtractor::vgg19(&broken).is_err());
}

#[test]
fn config_round_trip() {
    let cfg: FeatureConfig = serde_json::from_str(r#"{"backbone": {"kind": "random", "seed": 3}, "taps": ["block2_conv1"]}"#).unwrap();
    let ex = FeatureExtractor::from_config(&cfg).unwrap();
    assert_eq!(ex.taps(), ["block2_conv1"]);
    assert!(serde_json::from_str::<FeatureConfig>(r#"{"taps": [], "extra": 1}"#).is_err());
    let missing = FeatureConfig { backbone: BackboneConfig::Vgg19 { path: "/nonexistent/vgg.safetensors".into() }, taps: vec![] };
    assert!(matches!(FeatureExtractor::from_config(&missing), Err(PddError::Io { .. })));
}

#[test]
fn pooled_descriptor_values() {
    let d = pooled_descriptor(&map(2, 1, 2, vec![1.0, 3.0, 5.0, 5.0])).unwrap();
    assert_eq!(d, vec![2.0, 5.0, 1.0, 0.0]);
}

#[test]
fn gaussian_fit_matches_hand_computation() {
    let s = GaussianStats::fit(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
    assert_eq!(s.count, 3);
    assert!((s.mean[0] - 1.0).abs() < 1e-12 && (s.mean[1] - 1.0).abs() < 1e-12);
    // deviations: (-1,-1), (1,-1), (0,2) → cov = [[2,0],[0,6]] / 2
    assert!((s.cov[(0, 0)] - 1.0).abs() < 1e-12);
    assert!(s.cov[(0, 1)].abs() < 1e-12);
    assert!((s.cov[(1, 1)] - 3.0).abs() < 1e-12);
    assert!(GaussianStats::fit(&[vec![1.0]]).is_err());
    assert!(GaussianStats::fit(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn feature_gaussian_over_images() {
    let imgs = procedural_corpus(4, 16, 16, 1).unwrap();
    let ex = FeatureExtractor::random(0);
    let s = fit_feature_gaussian(&imgs, &ex, "block2_conv2").unwrap();
    assert_eq!(s.mean.len(), 2 * 32);
    assert!(fit_feature_gaussian(&imgs, &ex, "block1_conv1").is_err());
    assert!(fit_feature_gaussian(&imgs[..1], &ex, "block2_conv2").is_err());
}
