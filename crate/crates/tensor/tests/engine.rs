use std::collections::HashMap;

use deepfrc_tensor::{grad_check, DiagnosticKind, GraphBuilder, Session, Tensor, TensorError};
use proptest::prelude::*;

fn feed(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn vec_t(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec())
}

#[test]
fn relu_forward() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[3], false).unwrap();
    let y = g.relu(x).unwrap();
    g.output("y", y);
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(&[("x", vec_t(&[-1.0, 0.0, 2.0]))])).unwrap();
    assert_eq!(s.output("y").unwrap().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[3], false).unwrap();
    let y = g.softmax(x).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(&[("x", vec_t(&[0.0; 3]))])).unwrap();
    for v in s.value(y).unwrap().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn conv_sliding_sum() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[1, 1, 4], false).unwrap();
    let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0; 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1d(x, w, b).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    let x_val = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    s.forward(feed(&[("x", x_val)])).unwrap();
    assert_eq!(s.value(y).unwrap().data(), &[3.0, 6.0, 9.0, 7.0]);
}

#[test]
fn square_gradient() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[1], true).unwrap();
    let y = g.square(x).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(&[("x", Tensor::scalar(3.0))])).unwrap();
    let grads = s.backward(y).unwrap();
    assert_eq!(grads["x"].item(), 6.0);
}

#[test]
fn relu_gradient_including_kink() {
    for (x0, expected) in [(2.0, 1.0), (-2.0, 0.0), (0.0, 0.0)] {
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[1], true).unwrap();
        let y = g.relu(x).unwrap();
        let graph = g.build();
        let mut s = Session::new(&graph);
        s.forward(feed(&[("x", Tensor::scalar(x0))])).unwrap();
        assert_eq!(s.backward(y).unwrap()["x"].item(), expected);
    }
}

#[test]
fn max_pool_ties_route_to_first() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[5], true).unwrap();
    let p = g.max_pool(x).unwrap();
    let y = g.sum(p).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(&[("x", vec_t(&[1.0, 1.0, 0.0, 3.0, 9.0]))])).unwrap();
    assert_eq!(s.value(p).unwrap().data(), &[1.0, 3.0]);
    assert_eq!(s.backward(y).unwrap()["x"].data(), &[1.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn cube_gradcheck() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[1], true).unwrap();
    let sq = g.square(x).unwrap();
    let cube = g.mul(sq, x).unwrap();
    let graph = g.build();
    let err = grad_check(&graph, &feed(&[("x", Tensor::scalar(1.0))]), cube, "x", 1e-5).unwrap();
    assert!(err <= 1e-8, "error {err:e}");
}

#[test]
fn affine_gradcheck() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[4], true).unwrap();
    let w = g.constant(vec_t(&[0.5, -1.0, 2.0, 0.25]));
    let wx = g.mul(x, w).unwrap();
    let s0 = g.sum(wx).unwrap();
    let y = g.add_scalar(s0, 3.0).unwrap();
    let graph = g.build();
    let err = grad_check(&graph, &feed(&[("x", vec_t(&[1.0, 2.0, -3.0, 0.5]))]), y, "x", 1e-3).unwrap();
    assert!(err <= 1e-10, "error {err:e}");
}

#[test]
fn three_layer_composition_gradcheck() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[2, 3], false).unwrap();
    let w1 = g.input("w1", &[4, 3], true).unwrap();
    let b1 = g.input("b1", &[4], true).unwrap();
    let w2 = g.input("w2", &[4, 4], true).unwrap();
    let b2 = g.input("b2", &[4], true).unwrap();
    let w3 = g.input("w3", &[2, 4], true).unwrap();
    let b3 = g.input("b3", &[2], true).unwrap();
    let h1 = g.linear(x, w1, b1).unwrap();
    let a1 = g.exp(h1).unwrap();
    let h2 = g.linear(a1, w2, b2).unwrap();
    let a2 = g.square(h2).unwrap();
    let h3 = g.linear(a2, w3, b3).unwrap();
    let p = g.softmax(h3).unwrap();
    let lp = g.log(p).unwrap();
    let loss = g.sum(lp).unwrap();
    let graph = g.build();
    let vals = |n: usize, k: f64| (0..n).map(|i| ((i as f64 + 1.0) * k).sin() * 0.5).collect::<Vec<_>>();
    let inputs = feed(&[
        ("x", Tensor::new(vec![2, 3], vals(6, 0.7)).unwrap()),
        ("w1", Tensor::new(vec![4, 3], vals(12, 1.3)).unwrap()),
        ("b1", vec_t(&vals(4, 2.1))),
        ("w2", Tensor::new(vec![4, 4], vals(16, 0.9)).unwrap()),
        ("b2", vec_t(&vals(4, 1.7))),
        ("w3", Tensor::new(vec![2, 4], vals(8, 2.9)).unwrap()),
        ("b3", vec_t(&vals(2, 0.3))),
    ]);
    for leaf in ["w1", "b1", "w2", "b2", "w3", "b3"] {
        let err = grad_check(&graph, &inputs, loss, leaf, 1e-5).unwrap();
        assert!(err <= 1e-4, "{leaf}: {err:e}");
    }
}

#[test]
fn backward_before_forward_rejected() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[1], true).unwrap();
    let y = g.square(x).unwrap();
    let graph = g.build();
    let s = Session::new(&graph);
    assert_eq!(s.backward(y).unwrap_err(), TensorError::NotEvaluated);
}

#[test]
fn non_scalar_root_rejected() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[2], true).unwrap();
    let y = g.square(x).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(&[("x", vec_t(&[1.0, 2.0]))])).unwrap();
    assert!(matches!(s.backward(y), Err(TensorError::NonScalarRoot { .. })));
    let err = grad_check(&graph, &feed(&[("x", vec_t(&[1.0, 2.0]))]), y, "x", 1e-5);
    assert!(matches!(err, Err(TensorError::NonScalarRoot { .. })));
}

#[test]
fn gradcheck_step_validated() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[1], true).unwrap();
    let y = g.square(x).unwrap();
    let graph = g.build();
    let inputs = feed(&[("x", Tensor::scalar(1.0))]);
    assert!(grad_check(&graph, &inputs, y, "x", 0.0).is_err());
    assert!(grad_check(&graph, &inputs, y, "x", 0.1).is_err());
    assert!(grad_check(&graph, &inputs, y, "x", 1e-2).is_ok());
}

#[test]
fn small_denominator_rejected_with_node() {
    let mut g = GraphBuilder::new();
    let a = g.input("a", &[2], false).unwrap();
    let b = g.input("b", &[2], false).unwrap();
    let q = g.div(a, b).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    let err = s
        .forward(feed(&[("a", vec_t(&[1.0, 1.0])), ("b", vec_t(&[1.0, 1e-9]))]))
        .unwrap_err();
    match err {
        TensorError::DivisionGuard { node, op, .. } => {
            assert_eq!(node, q.index());
            assert_eq!(op, "div");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn clamped_division_records_diagnostic() {
    let mut g = GraphBuilder::new();
    let a = g.input("a", &[2], false).unwrap();
    let b = g.input("b", &[2], false).unwrap();
    let q = g.div_clamped(a, b).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(&[("a", vec_t(&[1.0, 1.0])), ("b", vec_t(&[2.0, 0.0]))]))
        .unwrap();
    assert_eq!(s.value(q).unwrap().data(), &[0.5, 1e8]);
    let d = &s.diagnostics()[0];
    assert_eq!(
        (d.node, d.kind, d.count),
        (q.index(), DiagnosticKind::ClampedDenominator, 1)
    );
}

#[test]
fn input_shape_mismatch_rejected() {
    let mut g = GraphBuilder::new();
    g.input("x", &[3], false).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    assert!(matches!(
        s.forward(feed(&[("x", vec_t(&[1.0, 2.0]))])),
        Err(TensorError::InputShape { .. })
    ));
    assert!(matches!(s.forward(HashMap::new()), Err(TensorError::MissingInput(_))));
}

#[test]
fn non_finite_value_names_node() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[1], false).unwrap();
    let y = g.exp(x).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    let err = s.forward(feed(&[("x", Tensor::scalar(1e4))])).unwrap_err();
    assert_eq!(
        err,
        TensorError::NonFinite {
            node: y.index(),
            op: "exp"
        }
    );
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x * x + x uses x along three paths
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[1], true).unwrap();
    let xx = g.mul(x, x).unwrap();
    let y = g.add(xx, x).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(&[("x", Tensor::scalar(2.0))])).unwrap();
    assert_eq!(s.backward(y).unwrap()["x"].item(), 5.0);
}

#[test]
fn batch_norm_reports_batch_statistics() {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[2, 1, 2], false).unwrap();
    let gamma = g.constant(vec_t(&[1.0]));
    let beta = g.constant(vec_t(&[0.0]));
    let y = g.batch_norm_train(x, gamma, beta).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(&[(
        "x",
        Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    )]))
    .unwrap();
    let st = &s.batch_stats()[0];
    assert_eq!(st.node, y.index());
    assert_eq!(st.count, 4);
    assert_eq!(st.mean, vec![2.5]);
    assert_eq!(st.var, vec![1.25]);
    let out = s.value(y).unwrap().data();
    assert!(out.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn warp_guard_makes_zero_row_the_identity() {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[2, 5], false).unwrap();
    let y = g.warp_guard(x, &grid).unwrap();
    let graph = g.build();
    let mut s = Session::new(&graph);
    let rows = vec![0.0; 5].into_iter().chain([0.0, 0.1, 0.5, 0.6, 1.0]).collect();
    s.forward(feed(&[("x", Tensor::new(vec![2, 5], rows).unwrap())]))
        .unwrap();
    let out = s.value(y).unwrap().data();
    assert_eq!(&out[..5], &grid);
    assert_eq!(&out[5..], &[0.0, 0.1, 0.5, 0.6, 1.0]);
    assert!(s.diagnostics().iter().any(|d| d.kind == DiagnosticKind::DegenerateWarp));
}

fn run_graph(build: impl Fn(&mut GraphBuilder) -> deepfrc_tensor::NodeId, inputs: &[(&str, Tensor)]) -> Vec<f64> {
    let mut g = GraphBuilder::new();
    let out = build(&mut g);
    let graph = g.build();
    let mut s = Session::new(&graph);
    s.forward(feed(inputs)).unwrap();
    s.value(out).unwrap().data().to_vec()
}

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, len)
}

proptest! {
    #[test]
    fn cumsum_over_last_ends_at_one(v in prop::collection::vec(0.01..5.0f64, 2..40)) {
        let n = v.len();
        let out = run_graph(|g| {
            let x = g.input("x", &[n], false).unwrap();
            let c = g.cumsum(x).unwrap();
            let last = g.slice_last(c, n - 1, n).unwrap();
            g.div(c, last).unwrap()
        }, &[("x", Tensor::vector(v.clone()))]);
        prop_assert_eq!(out[n - 1], 1.0);
        prop_assert!(out.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn softmax_rows_are_distributions(v in finite_vec(1..30)) {
        let n = v.len();
        let out = run_graph(|g| {
            let x = g.input("x", &[n], false).unwrap();
            g.softmax(x).unwrap()
        }, &[("x", Tensor::vector(v.clone()))]);
        prop_assert!(out.iter().all(|&p| p > 0.0));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn identity_kernel_is_identity(v in finite_vec(1..50)) {
        let n = v.len();
        let out = run_graph(|g| {
            let x = g.input("x", &[1, 1, n], false).unwrap();
            let k = g.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
            let b = g.constant(Tensor::zeros(&[1]));
            g.conv1d(x, k, b).unwrap()
        }, &[("x", Tensor::new(vec![1, 1, n], v.clone()).unwrap())]);
        prop_assert_eq!(out, v);
    }

    #[test]
    fn gradient_is_linear_in_the_root(
        x in finite_vec(3..4),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        // d(a f + b h) = a df + b dh for f = sum(exp(x)/4), h = sum(x^2)
        let mut g = GraphBuilder::new();
        let xi = g.input("x", &[3], true).unwrap();
        let e = g.scale(xi, 0.25).unwrap();
        let e = g.exp(e).unwrap();
        let f = g.sum(e).unwrap();
        let sq = g.square(xi).unwrap();
        let h = g.sum(sq).unwrap();
        let fa = g.scale(f, a).unwrap();
        let hb = g.scale(h, b).unwrap();
        let combo = g.add(fa, hb).unwrap();
        let graph = g.build();
        let mut s = Session::new(&graph);
        s.forward(feed(&[("x", Tensor::vector(x.clone()))])).unwrap();
        let gc = s.backward(combo).unwrap().remove("x").unwrap();
        let gf = s.backward(f).unwrap().remove("x").unwrap();
        let gh = s.backward(h).unwrap().remove("x").unwrap();
        for i in 0..3 {
            let expected = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((gc.data()[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn forward_is_deterministic(v in finite_vec(2..20)) {
        let n = v.len();
        let build = |g: &mut GraphBuilder| {
            let x = g.input("x", &[n], false).unwrap();
            let s = g.softmax(x).unwrap();
            let c = g.cumsum(s).unwrap();
            g.norm(c).unwrap()
        };
        let a = run_graph(build, &[("x", Tensor::vector(v.clone()))]);
        let b = run_graph(build, &[("x", Tensor::vector(v.clone()))]);
        prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
    }
}
