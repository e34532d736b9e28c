mod common;

use proptest::prelude::*;
use tta_iqa::distortions::*;
use tta_iqa::eval::synth::{compression_quality, degrade, generate_synthetic_benchmark, SyntheticBenchmarkSpec};
use tta_iqa::{DistortionKind, Image, Level};

proptest! {
    #[test]
    fn sampled_parameters_stay_in_range(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        for kind in DistortionKind::ALL {
            for level in [Level::High, Level::Low] {
                let s = DistortionSpec::sample(kind, level, &mut r);
                let v = s.sampled_param;
                let ok = match (kind, level) {
                    (DistortionKind::Blur, Level::High) => (40.0..=80.0).contains(&v),
                    (DistortionKind::Blur, Level::Low) => (1.0..=20.0).contains(&v),
                    (DistortionKind::Compression, Level::High) => (30.0..=60.0).contains(&v) && v.fract() == 0.0,
                    (DistortionKind::Compression, Level::Low) => (80.0..=95.0).contains(&v) && v.fract() == 0.0,
                    (DistortionKind::Noise, Level::High) => (0.05..=0.1).contains(&v),
                    (DistortionKind::Noise, Level::Low) => (0.005..=0.01).contains(&v),
                };
                prop_assert!(ok, "{:?} {:?} {}", kind, level, v);
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let img = common::texture(16, 3, &mut r);
        for kind in DistortionKind::ALL {
            let t = make_triplet(&img, kind, &mut r).unwrap();
            prop_assert_eq!(t.kind, kind);
            prop_assert_eq!(t.high_spec.kind, kind);
            prop_assert_eq!(t.low_spec.kind, kind);
            prop_assert_eq!(&t.original, &img);
            for im in [&t.high, &t.low] {
                prop_assert!(im.same_dims(&img));
                prop_assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        let aug = quality_preserving_augment(&common::texture(24, 3, &mut r), 16, &mut r).unwrap();
        prop_assert_eq!((aug.height(), aug.width()), (16, 16));
    }
}

#[test]
fn blur_kernel_properties() {
    let k = gaussian_kernel_2d(1.3, 5).unwrap();
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(k[0], k[24]);
    assert!(gaussian_blur(&Image::constant(8, 8, 1, 0.5).unwrap(), 1.0, 4).is_err());
    assert!(gaussian_blur(&Image::constant(4, 4, 1, 0.5).unwrap(), 1.0, 5).is_err());
    let flat = gaussian_blur(&Image::constant(9, 9, 3, 0.25).unwrap(), 60.0, 5).unwrap();
    assert!(flat.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn compression_is_monotone_in_quality_on_average() {
    let imgs = common::textures(10, 16, 12);
    let mse = |q| imgs.iter().map(|im| compress(im, q).unwrap().mse(im).unwrap()).sum::<f64>();
    assert!(mse(30) > mse(60));
    assert!(mse(60) > mse(95));
    assert!(compress(&imgs[0], 0).is_err());
    assert!(compress(&imgs[0], 101).is_err());
}

#[test]
fn heavy_level_is_farther_from_original() {
    let mut r = common::rng(77);
    for kind in DistortionKind::ALL {
        let mut wins = 0;
        for _ in 0..100 {
            let img = common::texture(16, 3, &mut r);
            let t = make_triplet(&img, kind, &mut r).unwrap();
            if t.high.mse(&img).unwrap() > t.low.mse(&img).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{kind:?}: {wins}/100");
    }
}

#[test]
fn benchmark_ground_truth_is_monotone_in_severity() {
    let spec = SyntheticBenchmarkSpec { train_count: 30, test_count: 20, image_size: 16, ..Default::default() };
    let b = generate_synthetic_benchmark(&spec, &mut common::rng(1)).unwrap();
    assert_eq!((b.train.len(), b.test.len()), (30, 20));
    assert!(b.train.iter().all(|s| spec.source_family.contains(&s.kind)));
    assert!(b.test.iter().all(|s| spec.target_family.contains(&s.kind)));
    for s in b.train.iter().chain(&b.test) {
        assert_eq!(s.score, 1.0 - s.severity);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let again = generate_synthetic_benchmark(&spec, &mut common::rng(1)).unwrap();
    assert_eq!(again, b);
    let same = SyntheticBenchmarkSpec { target_family: spec.source_family.clone(), ..spec };
    assert!(same.validate().is_err());
}

#[test]
fn severity_zero_is_identity_and_quality_falls() {
    let img = common::textures(1, 16, 2).remove(0);
    for kind in DistortionKind::ALL {
        assert_eq!(degrade(&img, kind, 0.0, &mut common::rng(0)).unwrap(), img);
    }
    let qs: Vec<u32> = (0..=10).map(|l| compression_quality(l as f64 / 10.0)).collect();
    assert!(qs.windows(2).all(|w| w[0] >= w[1]), "{qs:?}");
    assert!(qs[10] <= 5 && qs[0] >= 90, "{qs:?}");
}
