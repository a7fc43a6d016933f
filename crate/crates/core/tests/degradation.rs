use pdd::corpus::{procedural_corpus, write_corpus};
use pdd::degradation::*;
use pdd::evalkit::psnr_y;
use pdd::imaging::resample::Interp;
use pdd::imaging::{ColorSpace, ImageTensor};
use pdd::PddError;

/// Keys cubic kernel, written out independently of the library.
fn keys(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        1.5 * t.powi(3) - 2.5 * t.powi(2) + 1.0
    } else if t < 2.0 {
        -0.5 * t.powi(3) + 2.5 * t.powi(2) - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Brute-force antialiased bicubic reduction of one row by an integer factor.
fn reference_reduce(row: &[f64], factor: usize) -> Vec<f64> {
    let n = row.len() as isize;
    let s = factor as f64;
    (0..row.len() / factor)
        .map(|o| {
            let u = (o as f64 + 0.5) * s - 0.5;
            let (mut acc, mut norm) = (0.0, 0.0);
            for i in -40..(n + 40) {
                let w = keys((u - i as f64) / s);
                acc += w * row[i.clamp(0, n - 1) as usize];
                norm += w;
            }
            acc / norm
        })
        .collect()
}

#[test]
fn bicubic_ramp_matches_reference() {
    let ramp = ImageTensor::from_fn(8, 8, 3, |_, x, _| x as f64 / 7.0).unwrap();
    let out = bicubic_downsample(&ramp, 4).unwrap();
    assert_eq!((out.height(), out.width()), (2, 2));
    let expect = reference_reduce(&(0..8).map(|x| x as f64 / 7.0).collect::<Vec<_>>(), 4);
    for y in 0..2 {
        for x in 0..2 {
            for c in 0..3 {
                assert!((out.get(y, x, c) - expect[x]).abs() < 1e-12, "({y},{x}) {} vs {}", out.get(y, x, c), expect[x]);
            }
        }
    }
    // a linear ramp sampled at the block centers 1.5 and 5.5 stays close to linear
    assert!((expect[0] - 1.5 / 7.0).abs() < 0.05 && (expect[1] - 5.5 / 7.0).abs() < 0.05);
}

#[test]
fn bicubic_constants_and_identity() {
    let c = ImageTensor::filled(16, 12, [0.25, 0.5, 0.75]).unwrap();
    let out = bicubic_downsample(&c, 4).unwrap();
    assert_eq!((out.height(), out.width()), (4, 3));
    assert!(out.data().chunks(3).all(|p| (p[0] - 0.25).abs() < 1e-12 && (p[2] - 0.75).abs() < 1e-12));
    let img = procedural_corpus(1, 16, 16, 3).unwrap().remove(0);
    let same = bicubic_downsample(&img, 1).unwrap();
    assert!(same.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(matches!(bicubic_downsample(&img, 3), Err(PddError::InvalidShape(_))));
}

#[test]
fn recipes_are_deterministic_and_in_range() {
    let cfg = PipelineConfig::general(4);
    for seed in 0..200 {
        let r = sample_recipe(&cfg, seed).unwrap();
        assert_eq!(r, sample_recipe(&cfg, seed).unwrap());
        assert_eq!(r.stages.len(), cfg.stage_count());
        let factors: Vec<f64> = r
            .stages
            .iter()
            .filter_map(|s| match *s {
                DegradationStage::Resize { factor, .. } => Some(factor),
                _ => None,
            })
            .collect();
        // the first round's factor is sampled; the second one lands on the LR size
        assert!((0.5..=1.2).contains(&factors[0]));
        assert!((factors[0] * factors[1] - 0.25).abs() < 1e-12);
        for s in &r.stages {
            match *s {
                DegradationStage::GaussianBlur { sigma } => assert!((0.2..=3.0).contains(&sigma)),
                DegradationStage::AnisotropicBlur { sigma_x, sigma_y, theta } => {
                    assert!((0.2..=3.0).contains(&sigma_x) && (0.2..=3.0).contains(&sigma_y));
                    assert!((0.0..std::f64::consts::PI).contains(&theta));
                }
                DegradationStage::GaussianNoise { sigma, .. } => assert!((1.0 / 255.0..=25.0 / 255.0).contains(&sigma)),
                DegradationStage::Resize { .. } => {}
                DegradationStage::Jpeg { quality } => assert!((30..=95).contains(&quality)),
            }
        }
        assert!(matches!(r.stages.last(), Some(DegradationStage::Jpeg { .. })));
    }
}

#[test]
fn collapsed_range_yields_that_value() {
    let cfg = PipelineConfig {
        domain: Domain::General,
        rounds: 1,
        order: StageOrder::Fixed,
        final_scale: 2,
        blur: Some(BlurRange { sigma: [1.25, 1.25], anisotropic_prob: 0.0 }),
        resize: None,
        noise: None,
        jpeg: None,
        scale_in_last_round: false,
    };
    let r = sample_recipe(&cfg, 9).unwrap();
    assert_eq!(r.stages, vec![DegradationStage::GaussianBlur { sigma: 1.25 }]);
}

#[test]
fn invalid_ranges_are_config_errors() {
    let mut cfg = PipelineConfig::general(4);
    cfg.blur = Some(BlurRange { sigma: [3.0, 0.2], anisotropic_prob: 0.0 });
    assert!(matches!(sample_recipe(&cfg, 0), Err(PddError::Config(_))));
    let mut cfg = PipelineConfig::general(4);
    cfg.jpeg = Some(JpegRange { quality: [0, 50] });
    assert!(matches!(sample_recipe(&cfg, 0), Err(PddError::Config(_))));
    let mut cfg = PipelineConfig::general(4);
    cfg.rounds = 3;
    assert!(matches!(sample_recipe(&cfg, 0), Err(PddError::Config(_))));
    let mut cfg = PipelineConfig::general(4);
    cfg.resize = None;
    assert!(matches!(sample_recipe(&cfg, 0), Err(PddError::Config(_))));
}

/// Blur σ is drawn log-uniformly, so `ln σ` must pass a KS uniformity test.
#[test]
fn blur_sigma_log_uniform_ks() {
    let cfg = PipelineConfig {
        domain: Domain::General,
        rounds: 1,
        order: StageOrder::Fixed,
        final_scale: 4,
        blur: Some(BlurRange { sigma: [0.2, 3.0], anisotropic_prob: 0.0 }),
        resize: None,
        noise: None,
        jpeg: None,
        scale_in_last_round: false,
    };
    let n = 10_000;
    let (lo, hi) = (0.2f64.ln(), 3.0f64.ln());
    let mut u: Vec<f64> = (0..n)
        .map(|seed| match sample_recipe(&cfg, seed as u64).unwrap().stages[0] {
            DegradationStage::GaussianBlur { sigma } => {
                assert!((0.2..=3.0).contains(&sigma));
                (sigma.ln() - lo) / (hi - lo)
            }
            ref s => panic!("unexpected stage {s:?}"),
        })
        .collect();
    u.sort_by(f64::total_cmp);
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).max(x - i as f64 / n as f64))
        .fold(0.0, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    assert!(d < critical, "KS statistic {d} exceeds {critical}");
}

#[test]
fn empty_recipe_equals_bicubic() {
    let hr = procedural_corpus(1, 32, 32, 5).unwrap().remove(0);
    let r = DegradationRecipe { stages: vec![], final_scale: 4, seed: 0 };
    assert_eq!(apply_recipe(&hr, &r).unwrap(), bicubic_downsample(&hr, 4).unwrap());
}

#[test]
fn zero_noise_is_identity() {
    let img = procedural_corpus(1, 16, 16, 6).unwrap().remove(0);
    let out = apply_stage(&img, &DegradationStage::GaussianNoise { sigma: 0.0, seed: 3 }).unwrap();
    assert_eq!(out, img);
}

#[test]
fn noise_statistics() {
    let gray = ImageTensor::filled(128, 128, [0.5; 3]).unwrap();
    let sigma = 10.0 / 255.0;
    let out = apply_stage(&gray, &DegradationStage::GaussianNoise { sigma, seed: 42 }).unwrap();
    let d: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sigma / (128.0f64 * 128.0).sqrt(), "mean {mean}");
    assert!((sd / sigma - 1.0).abs() < 0.05, "sd {sd}");
    let again = apply_stage(&gray, &DegradationStage::GaussianNoise { sigma, seed: 42 }).unwrap();
    assert_eq!(out, again);
}

#[test]
fn jpeg_quality_is_monotone_on_corpus() {
    for img in procedural_corpus(4, 48, 48, 21).unwrap() {
        let q10 = psnr_y(&jpeg_round_trip(&img, 10).unwrap(), &img).unwrap();
        let q95 = psnr_y(&jpeg_round_trip(&img, 95).unwrap(), &img).unwrap();
        let q100 = psnr_y(&jpeg_round_trip(&img, 100).unwrap(), &img).unwrap();
        assert!(q10 < q95, "{q10} vs {q95}");
        assert!(q100 > 30.0, "q100 {q100}");
    }
}

#[test]
fn blur_preserves_constants_and_smooths() {
    let c = ImageTensor::filled(20, 20, [0.3, 0.6, 0.9]).unwrap();
    for stage in [
        DegradationStage::GaussianBlur { sigma: 2.0 },
        DegradationStage::AnisotropicBlur { sigma_x: 0.5, sigma_y: 2.5, theta: 0.7 },
    ] {
        let out = apply_stage(&c, &stage).unwrap();
        assert!(out.data().chunks(3).all(|p| (p[1] - 0.6).abs() < 1e-12));
    }
    let img = procedural_corpus(1, 32, 32, 8).unwrap().remove(0);
    let blurred = apply_stage(&img, &DegradationStage::GaussianBlur { sigma: 2.0 }).unwrap();
    let tv = |i: &ImageTensor| pdd::evalkit::sharpness(i).unwrap();
    assert!(tv(&blurred) < tv(&img));
}

#[test]
fn serialized_recipe_reproduces_output() {
    let hr = procedural_corpus(1, 64, 64, 2).unwrap().remove(0);
    for seed in 0..5 {
        let r = sample_recipe(&PipelineConfig::general(4), seed).unwrap();
        let back: DegradationRecipe = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(apply_recipe(&hr, &r).unwrap(), apply_recipe(&hr, &back).unwrap());
        let out = apply_recipe(&hr, &r).unwrap();
        assert_eq!((out.height(), out.width()), (16, 16));
    }
}

#[test]
fn pseudo_real_is_fixed() {
    let cfg = PipelineConfig::pseudo_real(4);
    let a = sample_recipe(&cfg, 1).unwrap();
    let b = sample_recipe(&cfg, 2).unwrap();
    let strip = |r: &DegradationRecipe| -> Vec<DegradationStage> {
        r.stages
            .iter()
            .map(|s| match s {
                DegradationStage::GaussianNoise { sigma, .. } => DegradationStage::GaussianNoise { sigma: *sigma, seed: 0 },
                s => s.clone(),
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert!(a.stages.contains(&DegradationStage::Resize { interp: Interp::Bicubic, factor: 0.25 }));
}

#[test]
fn general_has_more_stages_than_specific() {
    let s = PipelineConfig::specific(4).stage_count();
    let g = PipelineConfig::general(4).stage_count();
    assert!(g > s && g >= 2 * s);
}

#[test]
fn synthesize_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let hr_dir = dir.path().join("hr");
    write_corpus(&hr_dir, 3, 32, 32, 4).unwrap();
    let out = dir.path().join("ds");
    let m = synthesize_dataset(&hr_dir, &PipelineConfig::specific(4), &out, 7).unwrap();
    assert_eq!(m.entries.len(), 3);
    assert!(m.entries.iter().all(|e| e.recipe.stages.is_empty()));
    let loaded = Manifest::load(&out.join(Manifest::FILE_NAME)).unwrap();
    assert_eq!(loaded, m);
    let pairs = loaded.load_pairs(&out).unwrap();
    assert!(pairs.iter().all(|(lr, hr)| lr.height() * 4 == hr.height()));

    let out2 = dir.path().join("ds2");
    synthesize_dataset(&hr_dir, &PipelineConfig::general(4), &out, 7).unwrap();
    synthesize_dataset(&hr_dir, &PipelineConfig::general(4), &out2, 7).unwrap();
    for e in &m.entries {
        let a = std::fs::read(out.join(&e.lr_path)).unwrap();
        let b = std::fs::read(out2.join(&e.lr_path)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn synthesize_empty_dir_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = synthesize_dataset(dir.path(), &PipelineConfig::specific(4), &dir.path().join("o"), 0).unwrap_err();
    assert!(matches!(err, PddError::Io { .. }));
}

#[test]
fn degradations_keep_values_in_range() {
    let img = ImageTensor::from_fn(32, 32, 3, |y, x, c| if (x + y + c) % 2 == 0 { 1.0 } else { 0.0 }).unwrap();
    assert_eq!(img.colorspace(), ColorSpace::Rgb);
    for seed in 0..10 {
        let r = sample_recipe(&PipelineConfig::general(4), seed).unwrap();
        let out = apply_recipe(&img, &r).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
