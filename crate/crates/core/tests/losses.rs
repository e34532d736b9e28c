mod common;

use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::LN_2;
use tta_iqa::gradcheck::grad_check;
use tta_iqa::losses::*;
use tta_iqa::model::images_to_tensor;
use tta_iqa::{BnMode, Image, ParamRole, Tensor};
use tta_iqa::tensor::{Tape, Var};

fn gc_value(rows: &[Vec<f64>], partition: &GroupPartition, opts: GcOptions) -> f64 {
    let d = rows[0].len();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap());
    let l = gc_loss(&mut tape, z, partition, opts).unwrap();
    tape.value(l).data()[0]
}

fn rank_value(z: &[Vec<f64>], zh: &[Vec<f64>], zl: &[Vec<f64>]) -> f64 {
    let d = z[0].len();
    let mut tape = Tape::new();
    let mut t = |rows: &[Vec<f64>]| tape.constant(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap());
    let (a, b, c) = (t(z), t(zh), t(zl));
    let l = rank_loss_batch(&mut tape, a, b, c).unwrap();
    tape.value(l).data()[0]
}

fn random_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Sum over ordered pairs, written out from the definition.
fn gc_oracle(rows: &[Vec<f64>], groups: &[Vec<usize>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for (ga, a) in groups.iter().enumerate() {
        for (gb, b) in groups.iter().enumerate() {
            if ga == gb {
                continue;
            }
            for &i in a {
                for &j in a {
                    if i == j {
                        continue;
                    }
                    let num = (cos(&rows[i], &rows[j]) / tau).exp();
                    let den: f64 = b.iter().map(|&k| (cos(&rows[i], &rows[k]) / tau).exp()).sum();
                    total -= (num / den).ln();
                }
            }
        }
    }
    total
}

#[test]
fn uniform_similarity_batch_is_four_ln2() {
    let rows = vec![vec![0.3, -0.2, 0.9]; 4];
    let part = form_groups(&[0.1, 0.2, 0.8, 0.9], 0.5, 2).unwrap();
    let v = gc_value(&rows, &part, GcOptions::default());
    assert!((v - 4.0 * LN_2).abs() < 1e-9, "{v}");
}

#[test]
fn separated_groups_score_lower() {
    let rows = vec![vec![1.0, 0.0], vec![1.0, 0.01], vec![-1.0, 0.0], vec![-1.0, 0.01]];
    let part = form_groups(&[0.1, 0.2, 0.8, 0.9], 0.5, 2).unwrap();
    assert!(gc_value(&rows, &part, GcOptions::default()) < 4.0 * LN_2);
}

#[test]
fn rank_scalar_values() {
    assert_eq!(rank_probability(TripletDistances { d_high: 1.5, d_low: 1.5 }), 0.5);
    let p = rank_probability(TripletDistances { d_high: 3f64.ln(), d_low: 0.0 });
    assert!((p - 0.75).abs() < 1e-15);
    let tiny = rank_probability(TripletDistances { d_high: 0.0, d_low: 50.0 });
    assert!((tiny / 1.9287498479639178e-22 - 1.0).abs() < 1e-12);
    let huge = rank_probability(TripletDistances { d_high: 0.0, d_low: 700.0 });
    assert!(huge > 0.0 && huge.is_finite());
    assert!((rank_loss_single(0.5) - LN_2).abs() < 1e-12);
    let l = rank_loss_fused(TripletDistances { d_high: 0.0, d_low: 10.0 });
    assert!((l - 10.000045398899218).abs() < 1e-12);
    assert!((rank_loss_fused(TripletDistances { d_high: 2.0, d_low: 1.0 }) - 0.31326168751822286).abs() < 1e-12);
}

#[test]
fn rank_batch_equal_branches_is_n_ln2() {
    let mut r = common::rng(3);
    let z = random_rows(5, 4, &mut r);
    let h = random_rows(5, 4, &mut r);
    assert!((rank_value(&z, &h, &h) - 5.0 * LN_2).abs() < 1e-12);
}

#[test]
fn combined_additivity() {
    let b = combined_loss(2.7726, 0.6931, 1.0, 1.0);
    assert_eq!(b.combined, 2.7726 + 0.6931);
    assert_eq!(combined_loss(1.25, 9.0, 0.0, 1.0).combined, 1.25);
    let mut r = common::rng(9);
    let z = random_rows(8, 6, &mut r);
    let zh = random_rows(8, 6, &mut r);
    let zl = random_rows(8, 6, &mut r);
    let part = form_groups(&(0..8).map(f64::from).collect::<Vec<_>>(), 0.25, 2).unwrap();
    let mut tape = Tape::new();
    let mut t = |rows: &[Vec<f64>]| tape.constant(Tensor::new(vec![8, 6], rows.concat()).unwrap());
    let (a, b, c) = (t(&z), t(&zh), t(&zl));
    for obj in [Objective::Combined, Objective::GcOnly, Objective::RankOnly] {
        let (v, br) = combined_objective(&mut tape, a, &[(b, c)], &part, obj, 1.0, GcOptions::default()).unwrap();
        assert_eq!(tape.value(v).data()[0], br.combined);
        assert_eq!(br.combined, br.gc + br.rank);
        assert_eq!(br.gc == 0.0, !obj.uses_gc());
        assert_eq!(br.rank == 0.0, !obj.uses_rank());
    }
}

#[test]
fn gc_matches_definition_for_several_groups() {
    let mut r = common::rng(17);
    for g in 2..=4 {
        let rows = random_rows(12, 5, &mut r);
        let scores: Vec<f64> = (0..12).map(|_| r.random()).collect();
        let part = form_groups(&scores, 0.25, g.min(4)).unwrap();
        let got = gc_value(&rows, &part, GcOptions { tau: 0.7, positive_in_denominator: false });
        let want = gc_oracle(&rows, &part.groups, 0.7);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "G={g}: {got} vs {want}");
    }
}

#[test]
fn rotation_loss_of_zero_head_is_ln4() {
    let mut m = common::tiny_model(0);
    let (w, b) = m.rotation_head_mut();
    w.data_mut().fill(0.0);
    b.data_mut().fill(0.0);
    let imgs = common::textures(3, 16, 1);
    let l = rotation_loss(&m, &imgs, BnMode::Eval).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);
    let (imgs, targets) = rotation_batch(&imgs).unwrap();
    assert_eq!(imgs.len(), 12);
    assert_eq!(&targets[..4], &[0, 1, 2, 3]);
    let wide = Image::constant(16, 20, 3, 0.5).unwrap();
    assert!(rotation_loss(&m, &[wide], BnMode::Eval).is_err());
}

fn rows_strategy(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gc_invariant_to_within_group_permutation_and_group_swap(rows in rows_strategy(8), scores in prop::collection::vec(0.0f64..1.0, 8)) {
        let part = form_groups(&scores, 0.25, 2).unwrap();
        let base = gc_value(&rows, &part, GcOptions::default());
        let mut shuffled = part.clone();
        shuffled.groups[0].reverse();
        shuffled.groups[1].reverse();
        prop_assert!((gc_value(&rows, &shuffled, GcOptions::default()) - base).abs() < 1e-12);
        let mut swapped = part.clone();
        swapped.groups.swap(0, 1);
        prop_assert!((gc_value(&rows, &swapped, GcOptions::default()) - base).abs() < 1e-12);
    }

    #[test]
    fn gc_invariant_to_positive_row_scaling(rows in rows_strategy(8), scores in prop::collection::vec(0.0f64..1.0, 8), k in prop::collection::vec(0.01f64..100.0, 8)) {
        let part = form_groups(&scores, 0.25, 2).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&k).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
        let a = gc_value(&rows, &part, GcOptions::default());
        let b = gc_value(&scaled, &part, GcOptions::default());
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn rank_loss_strictly_decreasing_in_margin(d_high in 0.0f64..20.0, d_low in 0.0f64..20.0, bump in 1e-3f64..5.0) {
        let a = rank_loss_fused(TripletDistances { d_high, d_low });
        let b = rank_loss_fused(TripletDistances { d_high: d_high + bump, d_low });
        let c = rank_loss_fused(TripletDistances { d_high, d_low: d_low + bump });
        prop_assert!(b < a);
        prop_assert!(c > a);
        let p = rank_probability(TripletDistances { d_high, d_low });
        prop_assert!((rank_loss_single(p) - a).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn rank_gradient_signs(z in rows_strategy(4), zh in rows_strategy(4), zl in rows_strategy(4)) {
        // d(loss)/d(d_high) < 0 and d(loss)/d(d_low) > 0, via distances as leaves
        let mut tape = Tape::new();
        let dh: Vec<f64> = z.iter().zip(&zh).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()).collect();
        let dl: Vec<f64> = z.iter().zip(&zl).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()).collect();
        let h = tape.leaf(&Tensor::from_vec(dh).with_requires_grad(true));
        let l = tape.leaf(&Tensor::from_vec(dl).with_requires_grad(true));
        let m = tape.sub(l, h).unwrap();
        let sp = tape.softplus(m);
        let loss = tape.sum(sp);
        tape.backward(loss).unwrap();
        prop_assert!(tape.grad(h).unwrap().iter().all(|&g| g < 0.0));
        prop_assert!(tape.grad(l).unwrap().iter().all(|&g| g > 0.0));
    }

    #[test]
    fn groups_depend_only_on_ranks(scores in prop::collection::vec(-3.0f64..3.0, 4..24), g in 2usize..4) {
        let n = scores.len();
        let p = 1.0 / (2.0 * g as f64);
        prop_assume!(group_size(p, n) >= 1 && group_size(p, n) * g <= n);
        let a = form_groups(&scores, p, g).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() - 7.0).collect();
        let b = form_groups(&t, p, g).unwrap();
        prop_assert_eq!(&a.groups, &b.groups);
        let mut seen: Vec<usize> = a.groups.concat();
        let total = seen.len();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), total);
        prop_assert!(a.groups.iter().all(|grp| grp.len() == group_size(p, n)));
    }
}

fn grad_err(f: impl FnMut(&mut Tape, &[Var]) -> tta_iqa::Result<Var>, params: &[Tensor]) -> f64 {
    grad_check(f, params, 1e-6).unwrap()
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = common::rng(21);
    for case in 0..20 {
        let n = 8;
        let d = 5;
        let z = Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let zh = Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let zl = Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let part = form_groups(&scores, 0.25, 2).unwrap();
        let tau = r.random_range(0.5..2.0);
        let opts = GcOptions { tau, positive_in_denominator: case % 2 == 1 };
        let e_gc = grad_err(|t, v| gc_loss(t, v[0], &part, opts), std::slice::from_ref(&z));
        let e_rank = grad_err(|t, v| rank_loss_batch(t, v[0], v[1], v[2]), &[z.clone(), zh.clone(), zl.clone()]);
        let e_all = grad_err(
            |t, v| Ok(combined_objective(t, v[0], &[(v[1], v[2])], &part, Objective::Combined, 1.0, opts)?.0),
            &[z.clone(), zh.clone(), zl.clone()],
        );
        for (name, e) in [("gc", e_gc), ("rank", e_rank), ("combined", e_all)] {
            assert!(e < 1e-4, "case {case}: {name} gradient error {e}");
        }
    }
}

#[test]
fn adapt_step_gradient_through_model() {
    let model = common::tiny_model(4);
    let idx = model.adaptable_indices();
    let params: Vec<Tensor> = idx.iter().map(|&i| model.params()[i].clone()).collect();
    let imgs = common::textures(4, 16, 8);
    let highs: Vec<Image> = imgs.iter().map(|im| tta_iqa::distortions::gaussian_blur(im, 3.0, 5).unwrap()).collect();
    let lows: Vec<Image> = imgs.iter().map(|im| tta_iqa::distortions::gaussian_blur(im, 0.8, 5).unwrap()).collect();
    let part = form_groups(&[0.1, 0.7, 0.3, 0.9], 0.25, 2).unwrap();
    let err = grad_err(
        |t, v| {
            let mut vars = model.bind(t, |_| false);
            for (k, &i) in idx.iter().enumerate() {
                vars[i] = v[k];
            }
            let x = t.constant(images_to_tensor(&imgs)?);
            let xh = t.constant(images_to_tensor(&highs)?);
            let xl = t.constant(images_to_tensor(&lows)?);
            let z = model.forward_frozen(t, &vars, x, BnMode::BatchStats)?.projection;
            let zh = model.forward_frozen(t, &vars, xh, BnMode::BatchStats)?.projection;
            let zl = model.forward_frozen(t, &vars, xl, BnMode::BatchStats)?.projection;
            Ok(combined_objective(t, z, &[(zh, zl)], &part, Objective::Combined, 1.0, GcOptions::default())?.0)
        },
        &params,
    );
    assert!(err < 1e-4, "{err}");
    assert!(idx.iter().all(|&i| model.roles()[i].is_adaptable()));
    assert!(idx.iter().any(|&i| model.roles()[i] == ParamRole::Projection));
}
