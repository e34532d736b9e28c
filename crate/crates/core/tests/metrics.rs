use proptest::prelude::*;
use tta_iqa::eval::metrics::{midranks, plcc, srocc};

fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

proptest! {
    #[test]
    fn midranks_match_counting(v in prop::collection::vec(0i32..5, 1..12)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        prop_assert_eq!(midranks(&v), oracle_ranks(&v));
    }

    #[test]
    fn srocc_invariant_to_monotone_transforms(v in prop::collection::vec(-5.0f64..5.0, 3..30), g in prop::collection::vec(-5.0f64..5.0, 30)) {
        let g = &g[..v.len()];
        let r = srocc(&v, g).unwrap();
        prop_assume!(r.is_finite());
        let t: Vec<f64> = v.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(srocc(&t, g).unwrap(), r);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        prop_assert!((srocc(&neg, g).unwrap() + r).abs() < 1e-12);
    }

    #[test]
    fn plcc_invariant_to_positive_affine(v in prop::collection::vec(-5.0f64..5.0, 3..30), g in prop::collection::vec(-5.0f64..5.0, 30), a in 0.1f64..10.0, b in -3.0f64..3.0) {
        let g = &g[..v.len()];
        let r = plcc(&v, g).unwrap();
        prop_assume!(r.is_finite());
        let t: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        prop_assert!((plcc(&t, g).unwrap() - r).abs() < 1e-9);
        prop_assert!(r.abs() <= 1.0);
    }

    #[test]
    fn srocc_matches_oracle(v in prop::collection::vec(0i32..4, 3..15), g in prop::collection::vec(-2.0f64..2.0, 15)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let g = &g[..v.len()];
        let want = oracle_pearson(&oracle_ranks(&v), &oracle_ranks(g));
        let got = srocc(&v, g).unwrap();
        if want.is_nan() {
            prop_assert!(got.is_nan());
        } else {
            prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn symmetric_in_arguments(v in prop::collection::vec(-1.0f64..1.0, 3..20), g in prop::collection::vec(-1.0f64..1.0, 20)) {
        let g = &g[..v.len()];
        prop_assert_eq!(srocc(&v, g).unwrap().to_bits(), srocc(g, &v).unwrap().to_bits());
        prop_assert_eq!(plcc(&v, g).unwrap().to_bits(), plcc(g, &v).unwrap().to_bits());
    }
}

#[test]
fn endpoints_are_exact() {
    let a = [0.3, 0.1, 0.9, 0.5, 0.7];
    let up: Vec<f64> = a.iter().map(|x| x * x * 10.0).collect();
    let down: Vec<f64> = a.iter().map(|x| -x.powi(3)).collect();
    assert_eq!(srocc(&a, &up).unwrap(), 1.0);
    assert_eq!(srocc(&a, &down).unwrap(), -1.0);
    assert_eq!(plcc(&a, &a).unwrap(), 1.0);
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert_eq!(plcc(&a, &neg).unwrap(), -1.0);
}

#[test]
fn degenerate_and_invalid_inputs() {
    assert!(srocc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap().is_nan());
    assert!(plcc(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap().is_nan());
    assert!(srocc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    assert!(plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    assert!(srocc(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]).is_err());
}
