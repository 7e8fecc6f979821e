use deepfrc_core::spectral::{fourier_basis, trapezoid_weights, BasisSet};
use deepfrc_core::srvf::{srvf_transform, warped_srvf, warped_srvf_grad_autodiff, warped_srvf_grad_oracle};
use deepfrc_core::synthgen::{exp_warp, gaussian_bump};
use deepfrc_core::TimeGrid;
use deepfrc_tensor::{grad_check, GraphBuilder, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::collections::HashMap;
use std::f64::consts::PI;

fn uniform(m: usize) -> Vec<f64> {
    (0..m).map(|k| k as f64 / (m - 1) as f64).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fourier functions in the library's order, written out independently.
fn phi(j: usize, t: f64) -> f64 {
    if j == 0 {
        1.0
    } else {
        let freq = j.div_ceil(2) as f64;
        let arg = 2.0 * PI * freq * t;
        if j % 2 == 1 {
            2f64.sqrt() * arg.sin()
        } else {
            2f64.sqrt() * arg.cos()
        }
    }
}

// Smooth test signal and the SRVF of a bump curve.
fn smooth_q(t: &[f64]) -> Vec<f64> {
    t.iter().map(|&s| (3.0 * s).sin() + s * s).collect()
}

#[test]
fn identity_warp_leaves_srvf_unchanged() {
    let t = uniform(101);
    let q = smooth_q(&t);
    assert!(max_abs(&warped_srvf(&q, &t, &t).unwrap(), &q) <= 1e-12);
}

#[test]
fn unit_srvf_warps_to_root_slope() {
    let t = uniform(201);
    let gamma: Vec<f64> = t.iter().map(|&s| exp_warp(s, 0.8)).collect();
    let out = warped_srvf(&vec![1.0; t.len()], &gamma, &t).unwrap();
    let slope = deepfrc_core::interp::central_diff(&gamma, &t);
    for (o, s) in out.iter().zip(slope) {
        assert!((o - s.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn warping_preserves_srvf_energy() {
    let n = 1000;
    let t = uniform(n);
    let w = trapezoid_weights(&t);
    let x: Vec<f64> = t
        .iter()
        .map(|&s| gaussian_bump(s, 13.0, 0.3, 0.08) + gaussian_bump(s, 12.0, 0.7, 0.09))
        .collect();
    let q = srvf_transform(&x, &t);
    let energy = |v: &[f64]| v.iter().zip(&w).map(|(a, w)| a * a * w).sum::<f64>();
    let base = energy(&q);
    for b in [-1.5, -1.0, -0.5, 0.5, 1.0, 1.5] {
        let gamma: Vec<f64> = t.iter().map(|&s| exp_warp(s, b)).collect();
        let warped = warped_srvf(&q, &gamma, &t).unwrap();
        let rel = (energy(&warped) - base).abs() / base;
        assert!(rel <= 0.02, "b = {b}: relative energy change {rel}");
    }
}

fn oracle_gap(n: usize) -> f64 {
    let t = uniform(n);
    let q = smooth_q(&t);
    let gamma: Vec<f64> = t.iter().map(|&s| exp_warp(s, 1.0)).collect();
    let a = warped_srvf_grad_oracle(&q, &gamma, &t).unwrap();
    let b = warped_srvf_grad_autodiff(&q, &gamma, &t).unwrap();
    let interior = 2..n - 2;
    let diff = a[interior.clone()]
        .iter()
        .zip(&b[interior.clone()])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a[interior].iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale
}

#[test]
fn gradient_oracle_matches_autodiff_and_converges() {
    let e1 = oracle_gap(1000);
    let e2 = oracle_gap(2000);
    assert!(e1 <= 1e-2, "relative gap {e1} at n = 1000");
    assert!(e2 <= 0.55 * e1, "gap {e1} -> {e2} does not halve");
}

#[test]
fn constant_basis_and_near_orthonormal_gram() {
    let g1 = fourier_basis(1, &TimeGrid::uniform(11)).unwrap();
    assert_eq!(g1.phi(), &[1.0; 11]);
    assert!((g1.gram()[(0, 0)] - 1.0).abs() < 1e-12);

    let b = fourier_basis(7, &TimeGrid::uniform(1001)).unwrap();
    let dev = (b.gram() - DMatrix::identity(7, 7)).abs().max();
    assert!(dev <= 1e-3, "{dev}");
}

#[test]
fn gram_matches_fine_quadrature() {
    // Composite Simpson with 1e5 intervals on the analytic functions.
    let intervals = 100_000;
    let h = 1.0 / intervals as f64;
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let mut s = f(0.0) + f(1.0);
        for i in 1..intervals {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        s * h / 3.0
    };
    let b = fourier_basis(3, &TimeGrid::uniform(2001)).unwrap();
    for j in 0..3 {
        for k in 0..3 {
            let exact = simpson(&|t| phi(j, t) * phi(k, t));
            assert!((b.gram()[(j, k)] - exact).abs() <= 1e-6, "G[{j},{k}]");
        }
    }
}

#[test]
fn basis_functions_project_to_unit_vectors() {
    let grid = TimeGrid::uniform(500);
    let b = fourier_basis(9, &grid).unwrap();
    let t = grid.points();
    let first: Vec<f64> = t.iter().map(|&s| phi(0, s)).collect();
    let c = b.project(&first).unwrap();
    assert!((c[0] - 1.0).abs() <= 1e-6);
    assert!(c[1..].iter().all(|v| v.abs() <= 1e-6));

    let mix: Vec<f64> = t.iter().map(|&s| 2.0 * phi(1, s) + 3.0 * phi(2, s)).collect();
    let c = b.project(&mix).unwrap();
    assert!((c[1] - 2.0).abs() <= 1e-4 && (c[2] - 3.0).abs() <= 1e-4);
    assert!(b.reconstruct(&[0.0; 9]).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn bump_projection_matches_normal_equations() {
    let n = 1000;
    let grid = TimeGrid::uniform(n);
    let t = grid.points();
    let k = 100;
    let b = fourier_basis(k, &grid).unwrap();
    let x: Vec<f64> = t.iter().map(|&s| gaussian_bump(s, 13.0, 0.25, 0.06)).collect();
    let c = b.project(&x).unwrap();
    let recon = b.reconstruct(&c).unwrap();
    // The bump does not vanish at t = 0, so the periodic basis leaves a
    // boundary error of the order of that jump; the interior meets 1e-3.
    let jump = (x[0] - x[n - 1]).abs();
    assert!(max_abs(&recon[5..n - 5], &x[5..n - 5]) <= 1e-3);
    assert!(max_abs(&recon, &x) <= jump);

    let w = trapezoid_weights(t);
    let phi_m = DMatrix::from_fn(n, k, |i, j| phi(j, t[i]));
    let wm = DMatrix::from_diagonal(&DVector::from_vec(w));
    let gram = phi_m.transpose() * &wm * &phi_m;
    let rhs = phi_m.transpose() * &wm * DVector::from_vec(x);
    let oracle = gram.lu().solve(&rhs).unwrap();
    let gap = c
        .iter()
        .zip(oracle.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 1e-8, "{gap}");
}

fn random_basis() -> BasisSet {
    fourier_basis(11, &TimeGrid::uniform(64)).unwrap()
}

proptest! {
    #[test]
    fn project_reconstruct_round_trips(c in prop::collection::vec(-5.0f64..5.0, 11)) {
        let b = random_basis();
        let back = b.project(&b.reconstruct(&c).unwrap()).unwrap();
        prop_assert!(max_abs(&back, &c) <= 1e-8);
    }

    #[test]
    fn smoothing_is_idempotent(x in prop::collection::vec(-3.0f64..3.0, 64)) {
        let b = random_basis();
        let once = b.reconstruct(&b.project(&x).unwrap()).unwrap();
        let twice = b.reconstruct(&b.project(&once).unwrap()).unwrap();
        prop_assert!(max_abs(&once, &twice) <= 1e-10);
    }

    #[test]
    fn projection_is_linear(
        x in prop::collection::vec(-3.0f64..3.0, 64),
        y in prop::collection::vec(-3.0f64..3.0, 64),
        a in -2.0f64..2.0,
        c in -2.0f64..2.0,
    ) {
        let b = random_basis();
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + c * v).collect();
        let lhs = b.project(&mixed).unwrap();
        let (px, py) = (b.project(&x).unwrap(), b.project(&y).unwrap());
        let rhs: Vec<f64> = px.iter().zip(&py).map(|(u, v)| a * u + c * v).collect();
        prop_assert!(max_abs(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn residual_is_orthogonal_to_basis(x in prop::collection::vec(-3.0f64..3.0, 64)) {
        let b = random_basis();
        let recon = b.reconstruct(&b.project(&x).unwrap()).unwrap();
        let w = b.weights();
        for j in 0..b.k() {
            let k = b.k();
            let ip: f64 = (0..64).map(|i| (x[i] - recon[i]) * b.phi()[i * k + j] * w[i]).sum();
            prop_assert!(ip.abs() <= 1e-6);
        }
    }
}

#[test]
fn projection_gradient_passes_check() {
    let b = random_basis();
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[2, 1, 64], true).unwrap();
    let p = g.constant(Tensor::new(vec![11, 64], b.projector().unwrap().to_vec()).unwrap());
    let c = g.matvec(p, x).unwrap();
    let sq = g.square(c).unwrap();
    let root = g.sum(sq).unwrap();
    let graph = g.build();
    let values: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin()).collect();
    let inputs = HashMap::from([("x".to_string(), Tensor::new(vec![2, 1, 64], values).unwrap())]);
    assert!(grad_check(&graph, &inputs, root, "x", 1e-5).unwrap() <= 1e-6);
}
