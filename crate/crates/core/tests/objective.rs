use std::collections::HashMap;

use deepfrc_core::classifier::{self, argmax, classify_node, smoothed_softmax, smoothing_weight, PROB_FLOOR};
use deepfrc_core::losses::{alignment_loss, cross_entropy, intra_node, total_loss};
use deepfrc_core::params::{Group, ParamStore};
use deepfrc_tensor::{grad_check, GraphBuilder, Session, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type ClassifierGraph = (
    deepfrc_tensor::Graph,
    deepfrc_tensor::NodeId,
    deepfrc_tensor::NodeId,
    ParamStore,
);

fn classifier_graph(inputs: usize, classes: usize, batch: usize) -> ClassifierGraph {
    let mut store = ParamStore::new();
    classifier::init_params(&mut store, inputs, classes, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut g = GraphBuilder::new();
    let mut nodes = HashMap::new();
    for p in store.iter() {
        nodes.insert(p.name.clone(), g.input(&p.name, &p.shape, true).unwrap());
    }
    let c = g.input("c", &[batch, inputs], true).unwrap();
    let lambda = smoothing_weight(classes, PROB_FLOOR).unwrap();
    let out = classify_node(&mut g, c, &nodes, lambda).unwrap();
    let logp = g.log(out.probs).unwrap();
    let w = g.constant(
        Tensor::new(
            vec![batch, classes],
            (0..batch * classes).map(|i| 1.0 + i as f64 * 0.3).collect(),
        )
        .unwrap(),
    );
    let prod = g.mul(logp, w).unwrap();
    let root = g.sum(prod).unwrap();
    (g.build(), root, out.probs, store)
}

#[test]
fn classifier_gradients_pass_check() {
    let (graph, root, _, store) = classifier_graph(6, 3, 4);
    let mut inputs = HashMap::new();
    store.feed(&mut inputs);
    // Shift biases off zero so no hidden unit sits on its kink.
    for p in store.iter() {
        if p.name.ends_with("bias") {
            let t = inputs.get_mut(&p.name).unwrap();
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.05 + 0.01 * i as f64);
        }
    }
    let c: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.4).collect();
    inputs.insert("c".into(), Tensor::new(vec![4, 6], c).unwrap());
    for leaf in store.iter().map(|p| p.name.clone()).chain(["c".to_string()]) {
        let err = grad_check(&graph, &inputs, root, &leaf, 1e-6).unwrap();
        assert!(err <= 1e-5, "{leaf}: {err}");
    }
}

#[test]
fn zero_classifier_is_uniform() {
    let (graph, _, probs, store) = classifier_graph(5, 4, 2);
    let mut inputs = HashMap::new();
    for p in store.iter() {
        inputs.insert(
            p.name.clone(),
            Tensor::new(p.shape.clone(), vec![0.0; p.data.len()]).unwrap(),
        );
    }
    inputs.insert("c".into(), Tensor::new(vec![2, 5], vec![1.5; 10]).unwrap());
    let mut s = Session::new(&graph);
    s.forward(inputs).unwrap();
    assert!(s.value(probs).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn extreme_binary_logits() {
    let lambda = smoothing_weight(2, PROB_FLOOR).unwrap();
    let p = smoothed_softmax(&[50.0, -50.0], lambda);
    assert!((p[0] - (1.0 - lambda / (1.0 + 2.0 * lambda))).abs() < 1e-15);
    assert!(p[1] >= PROB_FLOOR);
}

#[test]
fn permuting_logits_permutes_probabilities() {
    let lambda = smoothing_weight(3, PROB_FLOOR).unwrap();
    let p = smoothed_softmax(&[0.3, -1.0, 2.0], lambda);
    let q = smoothed_softmax(&[2.0, 0.3, -1.0], lambda);
    assert_eq!([p[2], p[0], p[1]], [q[0], q[1], q[2]]);
}

proptest! {
    #[test]
    fn smoothed_probabilities_respect_floor(
        logits in prop::collection::vec(prop_oneof![-1e6f64..1e6, -50.0f64..50.0, Just(1e6), Just(-1e6)], 2..10),
    ) {
        let lambda = smoothing_weight(logits.len(), PROB_FLOOR).unwrap();
        let p = smoothed_softmax(&logits, lambda);
        prop_assert!(p.iter().all(|&v| v >= PROB_FLOOR));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(argmax(&p), argmax(&logits));
    }

    #[test]
    fn loss_terms_are_non_negative(
        q in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..12),
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 12),
    ) {
        let labels: Vec<usize> = (0..q.len()).map(|i| i % 2).collect();
        let means = vec![vec![0.1, 0.0, -0.2], vec![1.0, 0.5, 0.0]];
        let l = alignment_loss(&q, &labels, &means).unwrap();
        prop_assert!(l.intra >= 0.0 && l.separation >= 0.0);
        let probs: Vec<Vec<f64>> = raw[..q.len()]
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let labels3: Vec<usize> = (0..q.len()).map(|i| i % 3).collect();
        prop_assert!(cross_entropy(&probs, &labels3).unwrap() >= 0.0);
    }
}

#[test]
fn class_at_its_mean_has_no_spread() {
    let q = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![4.0, 0.0], vec![6.0, 0.0]];
    let l = alignment_loss(&q, &[0, 0, 1, 1], &[vec![1.0, 2.0], vec![5.0, 0.0]]).unwrap();
    assert!((l.intra - 1.0).abs() < 1e-15);
}

#[test]
fn cross_entropy_hand_cases() {
    let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.25, 0.25, 0.5]];
    let ce = cross_entropy(&probs, &[0, 1, 2]).unwrap();
    let expected = -(0.7f64.ln() + 0.8f64.ln() + 0.5f64.ln()) / 3.0;
    assert!((ce - expected).abs() < 1e-15);

    let eps = PROB_FLOOR;
    let sharp = vec![vec![1.0 - 2.0 * eps, eps, eps]];
    let ce = cross_entropy(&sharp, &[0]).unwrap();
    assert!((ce + (1.0 - 2.0 * eps).ln()).abs() < 1e-15 && ce < 1e-3);
}

#[test]
fn total_loss_ablations() {
    assert_eq!(total_loss(1.0, 1.0, 1.0, 2.0, 3.0), 6.0);
    assert_eq!(total_loss(0.4, 0.2, 5.0, 1.0, 0.0), 0.4 + 0.2);
    assert_eq!(total_loss(0.0, 0.0, 0.3, 0.0, 2.0), 0.6);
}

#[test]
fn duplicating_samples_keeps_averaged_terms() {
    let q = vec![
        vec![0.0, 1.0],
        vec![2.0, 1.0],
        vec![5.0, 4.0],
        vec![3.0, 6.0],
        vec![4.0, 5.0],
    ];
    let labels = [0, 0, 1, 1, 1];
    let means = vec![vec![1.0, 1.0], vec![4.0, 5.0]];
    let probs = vec![
        vec![0.6, 0.4],
        vec![0.9, 0.1],
        vec![0.3, 0.7],
        vec![0.5, 0.5],
        vec![0.2, 0.8],
    ];
    let once = alignment_loss(&q, &labels, &means).unwrap();
    let ce_once = cross_entropy(&probs, &labels).unwrap();
    let q2 = [q.clone(), q].concat();
    let labels2 = [labels, labels].concat();
    let probs2 = [probs.clone(), probs].concat();
    let twice = alignment_loss(&q2, &labels2, &means).unwrap();
    assert!((once.intra - twice.intra).abs() < 1e-12);
    assert!((once.separation - twice.separation).abs() < 1e-12);
    assert!((ce_once - cross_entropy(&probs2, &labels2).unwrap()).abs() < 1e-12);
}

#[test]
fn spread_term_does_not_differentiate_means() {
    let mut g = GraphBuilder::new();
    let q = g.input("q", &[3, 4], true).unwrap();
    let means = g.input("means", &[3, 4], true).unwrap();
    let w = g.constant(Tensor::vector(vec![0.5, 0.5, 1.0]));
    let root = intra_node(&mut g, q, means, w).unwrap();
    let graph = g.build();
    let inputs = HashMap::from([
        (
            "q".to_string(),
            Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.3).collect()).unwrap(),
        ),
        (
            "means".to_string(),
            Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap(),
        ),
    ]);
    let mut s = Session::new(&graph);
    s.forward(inputs).unwrap();
    let grads = s.backward(root).unwrap();
    assert!(grads["means"].data().iter().all(|&v| v == 0.0));
    assert!(grads["q"].data().iter().any(|&v| v != 0.0));
}

#[test]
fn group_names_split_cleanly() {
    let mut store = ParamStore::new();
    classifier::init_params(&mut store, 4, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(store.iter().all(|p| p.group == Group::Classification));
    assert_eq!(store.len(), 6);
}
