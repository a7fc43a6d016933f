use pdd::corpus::procedural_corpus;
use pdd::evalkit::psnr_y;
use pdd::imaging::{images_to_tensor, tensor_to_images, ImageTensor};
use pdd::models::*;
use pdd::PddError;
use pdd_autograd::Graph;

fn tiny(scale: usize) -> GeneratorConfig {
    GeneratorConfig { scale, ..GeneratorConfig::tiny() }
}

fn small_disc() -> DiscriminatorConfig {
    DiscriminatorConfig { channels: 4, spectral_norm: true }
}

fn pair(mode: TrainMode, decay: f64) -> ModelPair {
    let s = Generator::new(&tiny(4), 1).unwrap();
    let g = Generator::new(&tiny(4), 2).unwrap();
    ModelPair::new(s, g, Discriminator::new(&small_disc(), 3).unwrap(), mode, decay).unwrap()
}

#[test]
fn generator_output_shapes() {
    let lr = procedural_corpus(1, 8, 12, 0).unwrap().remove(0);
    for scale in [2, 3, 4] {
        let out = Generator::new(&tiny(scale), 0).unwrap().predict(&lr).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (8 * scale, 12 * scale, 3));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(matches!(Generator::new(&tiny(5), 0), Err(PddError::Config(_))));
    assert!(matches!(Generator::new(&GeneratorConfig { blocks: 0, ..tiny(4) }, 0), Err(PddError::Config(_))));
}

#[test]
fn fresh_generator_starts_near_bicubic() {
    let hr = procedural_corpus(1, 32, 32, 1).unwrap().remove(0);
    let lr = pdd::degradation::bicubic_downsample(&hr, 4).unwrap();
    let out = Generator::new(&tiny(4), 0).unwrap().predict(&lr).unwrap();
    let bic = tensor_to_images(&bicubic_upsample(&images_to_tensor::<f64>(&[lr]).unwrap(), 4).unwrap()).unwrap().remove(0);
    assert!(psnr_y(&out, &bic).unwrap() > 25.0);

    let no_skip = GeneratorConfig { bicubic_skip: false, ..tiny(4) };
    let raw = Generator::new(&no_skip, 0).unwrap().predict(&pdd::degradation::bicubic_downsample(&hr, 4).unwrap()).unwrap();
    assert!(psnr_y(&raw, &bic).unwrap() < psnr_y(&out, &bic).unwrap());
}

#[test]
fn generator_is_seeded() {
    let a = Generator::new(&tiny(4), 7).unwrap();
    assert_eq!(a, Generator::new(&tiny(4), 7).unwrap());
    assert_ne!(a, Generator::new(&tiny(4), 8).unwrap());
}

#[test]
fn generator_gradients_reach_every_parameter() {
    let gen = Generator::new(&tiny(2), 0).unwrap();
    let lr = procedural_corpus(1, 6, 6, 3).unwrap();
    let mut g = Graph::<f64>::new();
    let bound = gen.bind(&mut g, true);
    let x = g.constant(images_to_tensor(&lr).unwrap());
    let y = gen.forward(&mut g, &bound, x).unwrap();
    let sq = g.square(y);
    let loss = g.mean(sq);
    let grads = g.backward(loss).unwrap();
    for (name, &leaf) in bound.leaves() {
        let gr = grads.get(leaf).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(gr.all_finite());
    }
    assert!(grads.get(x).is_none());
}

#[test]
fn discriminator_patch_logits() {
    let d = Discriminator::new(&small_disc(), 0).unwrap();
    let imgs = procedural_corpus(2, 32, 32, 0).unwrap();
    let mut g = Graph::<f32>::new();
    let b = d.bind(&mut g, false).unwrap();
    let x = g.constant(images_to_tensor(&imgs).unwrap());
    let l = d.logits(&mut g, &b, x).unwrap();
    assert_eq!(g.value(l).shape(), &[2, 1, 8, 8]);
    assert!(Discriminator::new(&DiscriminatorConfig { channels: 0, spectral_norm: true }, 0).is_err());
}

/// With spectral normalization the critic is invariant to rescaling its weights
/// (biases start at zero, and the singular vectors do not change direction).
#[test]
fn spectral_norm_removes_weight_scale() {
    let logits = |d: &Discriminator, imgs: &[ImageTensor]| {
        let mut g = Graph::<f64>::new();
        let b = d.bind(&mut g, false).unwrap();
        let x = g.constant(images_to_tensor(imgs).unwrap());
        let l = d.logits(&mut g, &b, x).unwrap();
        g.value(l).to_f64_vec()
    };
    let imgs = procedural_corpus(1, 16, 16, 5).unwrap();
    let mut d = Discriminator::new(&small_disc(), 1).unwrap();
    for _ in 0..50 {
        d.power_iterate().unwrap();
    }
    let mut scaled = d.clone();
    for (name, t) in scaled.params_mut().iter_mut() {
        if name.ends_with(".weight") {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let (a, b) = (logits(&d, &imgs), logits(&scaled, &imgs));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()), "{x} vs {y}");
    }

    let plain = DiscriminatorConfig { spectral_norm: false, ..small_disc() };
    let mut d = Discriminator::new(&plain, 1).unwrap();
    let before = logits(&d, &imgs);
    for (name, t) in d.params_mut().iter_mut() {
        if name.ends_with(".weight") {
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
    }
    assert!(before.iter().zip(logits(&d, &imgs)).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn ema_identities() {
    let flat = |g: &Generator| g.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect::<Vec<f32>>();

    let mut p = pair(TrainMode::PddEma, 0.0);
    ema_update(&mut p).unwrap();
    assert_eq!(flat(&p.generalist), flat(&p.specialist));

    let mut p = pair(TrainMode::PddEma, 1.0);
    let before = flat(&p.generalist);
    ema_update(&mut p).unwrap();
    assert_eq!(flat(&p.generalist), before);

    let mut p = pair(TrainMode::PddEma, 0.5);
    let (s, g) = (flat(&p.specialist), flat(&p.generalist));
    ema_update(&mut p).unwrap();
    for ((n, a), b) in flat(&p.generalist).iter().zip(&s).zip(&g) {
        assert!((n - 0.5 * (a + b)).abs() <= 1e-6 * (1.0 + n.abs()));
    }
}

#[test]
fn ema_only_in_ema_mode() {
    for mode in [TrainMode::PddStatic, TrainMode::NaiveDistill, TrainMode::SupervisedOnly] {
        let mut p = pair(mode, 0.9);
        assert!(matches!(ema_update(&mut p), Err(PddError::InvalidState(_))));
    }
}

#[test]
fn pair_validation() {
    let s = Generator::new(&tiny(4), 1).unwrap();
    let d = Discriminator::new(&small_disc(), 3).unwrap();
    assert!(matches!(ModelPair::new(s.clone(), s.clone(), d.clone(), TrainMode::PddEma, 1.5), Err(PddError::Config(_))));
    let other = Generator::new(&GeneratorConfig::default(), 1).unwrap();
    assert!(matches!(ModelPair::new(s.clone(), other.clone(), d.clone(), TrainMode::PddEma, 0.9), Err(PddError::Config(_))));
    assert!(ModelPair::new(s, other, d, TrainMode::PddStatic, 0.9).is_ok());
}

#[test]
fn mode_names_round_trip() {
    for m in TrainMode::ALL {
        assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!(matches!("pdd".parse::<TrainMode>(), Err(PddError::Config(_))));
    assert!(TrainMode::PddEma.is_pdd() && !TrainMode::PddEma.generalist_frozen());
    assert!(!TrainMode::NaiveDistill.is_pdd() && !TrainMode::SupervisedOnly.uses_generalist());
}

#[test]
fn predict_quad_uses_both_models() {
    let p = pair(TrainMode::PddStatic, 0.9);
    let imgs = procedural_corpus(2, 8, 8, 2).unwrap();
    let q = predict_quad(&p, &imgs[0], &imgs[1]).unwrap();
    assert_eq!(q.ys_u, p.specialist.predict(&imgs[0]).unwrap());
    assert_eq!(q.yg_u, p.generalist.predict(&imgs[0]).unwrap());
    assert_eq!(q.ys_l, p.specialist.predict(&imgs[1]).unwrap());
    assert_eq!(q.yg_l, p.generalist.predict(&imgs[1]).unwrap());
    assert_ne!(q.ys_u, q.yg_u);
}

#[test]
fn checkpoint_round_trip_and_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ckpt.bin");
    let mut p = pair(TrainMode::PddEma, 0.99);
    p.step = 42;
    save_checkpoint(&p, &path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, p);

    let ck = Checkpoint::load_expecting(&path, &p.arch()).unwrap();
    assert_eq!(ck.rng_state.next_step, 42);
    let mut arch = p.arch();
    arch.discriminator.channels = 8;
    assert!(matches!(Checkpoint::load_expecting(&path, &arch), Err(PddError::Config(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(PddError::Integrity(_))));

    assert!(matches!(load_checkpoint(&dir.path().join("missing.bin")), Err(PddError::Io { .. })));
}

#[test]
fn checkpoint_keeps_extra_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let mut extra = pdd::archive::Archive::default();
    extra.insert("adam.m.x", &[2], vec![1.0, 2.0]);
    let ck = Checkpoint {
        pair: pair(TrainMode::NaiveDistill, 0.9),
        rng_state: RngState { seed: 5, next_step: 9 },
        extra,
        trainer_state: serde_json::json!({"k": 1}),
    };
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}
