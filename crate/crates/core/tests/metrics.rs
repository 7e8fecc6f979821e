use deepfrc_core::metrics::{atv, classification_metrics, coeff_correlation, q_reg, registration_error, SrvfNorm};
use deepfrc_core::srvf::srvf_transform;
use deepfrc_core::synthgen::{generate, SynthConfig};
use deepfrc_core::TimeGrid;
use proptest::prelude::*;

fn uniform(m: usize) -> Vec<f64> {
    (0..m).map(|k| k as f64 / (m - 1) as f64).collect()
}

#[test]
fn identical_curves_have_no_spread() {
    let t = uniform(30);
    let a: Vec<f64> = t.iter().map(|s| s.sin()).collect();
    let b: Vec<f64> = t.iter().map(|s| s * s).collect();
    let q = vec![a.clone(), b.clone(), a, b];
    let norm = SrvfNorm::quadrature(&t);
    assert_eq!(q_reg(&q, &[0, 1, 0, 1], 2, &norm).unwrap(), 0.0);
    assert!(q_reg(&q, &[0, 0, 0, 0], 2, &norm).is_err());
}

#[test]
fn class_relabelling_leaves_q_reg() {
    let q: Vec<Vec<f64>> = (0..9)
        .map(|i| vec![(i as f64).sin(), (i * i) as f64 * 0.1, 1.0 / (1.0 + i as f64)])
        .collect();
    let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
    let relabelled: Vec<usize> = labels.iter().map(|&y| [2, 0, 1][y]).collect();
    for norm in [SrvfNorm::Euclidean, SrvfNorm::quadrature(&uniform(3))] {
        let a = q_reg(&q, &labels, 3, &norm).unwrap();
        let b = q_reg(&q, &relabelled, 3, &norm).unwrap();
        assert!((a - b).abs() < 1e-14);
    }
}

struct Warped {
    t: Vec<f64>,
    srvf: Vec<Vec<f64>>,
    labels: Vec<usize>,
    inverse: Vec<Vec<f64>>,
}

fn warped(n: usize) -> Warped {
    let mut cfg = SynthConfig::scaled(40, 0, 0, n);
    cfg.seed = 12;
    let g = generate(&cfg).unwrap();
    let grid = g.dataset.common_grid().unwrap();
    let t = grid.points().to_vec();
    Warped {
        srvf: g
            .dataset
            .samples()
            .iter()
            .map(|s| srvf_transform(&s.values[0], &t))
            .collect(),
        labels: g.dataset.labels(),
        inverse: g.truth.inverse_warps(&TimeGrid::uniform(n)),
        t,
    }
}

#[test]
fn registration_error_vanishes_for_equal_warps_and_not_for_identity() {
    let w = warped(200);
    let norm = SrvfNorm::quadrature(&w.t);
    let same = registration_error(&w.srvf, &w.inverse, &w.inverse, &w.labels, 2, &w.t, &norm).unwrap();
    assert_eq!(same, 0.0);
    let identity = vec![w.t.clone(); w.srvf.len()];
    let gap = registration_error(&w.srvf, &w.inverse, &identity, &w.labels, 2, &w.t, &norm).unwrap();
    assert!(gap > 0.1, "{gap}");
}

#[test]
fn atv_of_constant_classes_is_zero() {
    let t = uniform(11);
    let curves = vec![vec![0.0; 11], vec![0.0; 11], vec![1.0; 11], vec![1.0; 11]];
    assert_eq!(atv(&curves, &[0, 0, 1, 1], 2, &t).unwrap(), 0.0);
    assert!(atv(&curves, &[0, 0, 0, 0], 1, &t).is_err());
    let same = vec![vec![2.0; 11]; 4];
    assert!(atv(&same, &[0, 0, 1, 1], 2, &t).is_err());
}

proptest! {
    #[test]
    fn atv_ignores_common_shift(
        curves in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 12), 6),
        shift in -100.0f64..100.0,
    ) {
        let t = uniform(12);
        let labels = [0, 1, 2, 0, 1, 2];
        let shifted: Vec<Vec<f64>> = curves.iter().map(|c| c.iter().map(|v| v + shift).collect()).collect();
        let a = atv(&curves, &labels, 3, &t).unwrap();
        let b = atv(&shifted, &labels, 3, &t).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-8 * a.max(1.0));
    }

    #[test]
    fn correlation_is_invariant_to_positive_affine_maps(
        c in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..8),
        slope in 0.01f64..50.0,
        offset in -20.0f64..20.0,
    ) {
        let spread = c.concat().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        prop_assume!(spread.1 - spread.0 > 1e-3);
        let mapped: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| slope * v + offset).collect()).collect();
        let neg: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        prop_assert!((coeff_correlation(&c, &c).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!((coeff_correlation(&c, &mapped).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert!((coeff_correlation(&c, &neg).unwrap() + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn macro_f1_survives_relabelling(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = classification_metrics(&p, &y, 3).unwrap();
        let pp: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
        let yy: Vec<usize> = y.iter().map(|&v| perm[v]).collect();
        let b = classification_metrics(&pp, &yy, 3).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() <= 1e-12);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((0.0..=1.0).contains(&a.accuracy) && (0.0..=1.0).contains(&a.macro_f1));
    }
}

#[test]
fn classification_hand_cases() {
    let perfect = classification_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
    assert_eq!((perfect.accuracy, perfect.macro_f1), (1.0, 1.0));

    let single = classification_metrics(&[0; 6], &[0, 1, 0, 1, 0, 1], 2).unwrap();
    assert_eq!(single.accuracy, 0.5);
    assert!((single.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(single.per_class[1].f1, 0.0);
    assert_eq!(single.per_class[1].support, 3);
}
