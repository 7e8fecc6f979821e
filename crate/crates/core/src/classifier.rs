//! Small MLP over basis coefficients with a floored softmax output.

use std::collections::HashMap;

use deepfrc_tensor::{GraphBuilder, NodeId};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::params::{Group, ParamStore};

/// Hidden layer widths.
pub const HIDDEN: [usize; 2] = [8, 4];
/// Smallest probability the classifier may emit.
pub const PROB_FLOOR: f64 = 1e-4;

pub fn weight(l: usize) -> String {
    format!("class.fc{l}.weight")
}
pub fn bias(l: usize) -> String {
    format!("class.fc{l}.bias")
}

/// Additive smoothing weight `λ` for which `(p + λ) / (1 + Cλ) ≥ floor`
/// whenever `p ≥ 0`.
pub fn smoothing_weight(num_classes: usize, floor: f64) -> Result<f64> {
    let c = num_classes as f64;
    if num_classes == 0 || !(floor > 0.0 && floor * c < 1.0) {
        return Err(CoreError::Config(format!(
            "probability floor {floor} must lie in (0, 1/{num_classes})"
        )));
    }
    if num_classes <= 10 && floor == PROB_FLOOR {
        return Ok(1.1e-4);
    }
    Ok(1.1 * floor / (1.0 - c * floor))
}

/// Adds classifier parameters for `inputs` features and `classes` outputs.
pub fn init_params(store: &mut ParamStore, inputs: usize, classes: usize, rng: &mut impl Rng) -> Result<()> {
    if inputs == 0 || classes == 0 {
        return Err(CoreError::Config(
            "classifier needs inputs and at least one class".into(),
        ));
    }
    let sizes = [inputs, HIDDEN[0], HIDDEN[1], classes];
    for l in 0..3 {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        store.push_uniform(
            rng,
            &weight(l),
            Group::Classification,
            &[fan_out, fan_in],
            (1.0 / fan_in as f64).sqrt(),
        );
        store.push_constant(&bias(l), Group::Classification, &[fan_out], 0.0);
    }
    Ok(())
}

pub struct ClassifierNodes {
    pub logits: NodeId,
    /// Smoothed probabilities `[B, C]`.
    pub probs: NodeId,
}

/// `c [B, K·d]` -> two ReLU layers -> logits -> smoothed softmax.
pub fn classify_node(
    g: &mut GraphBuilder,
    coeffs: NodeId,
    params: &HashMap<String, NodeId>,
    lambda: f64,
) -> Result<ClassifierNodes> {
    let node = |name: &str| {
        params
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Config(format!("missing parameter node {name}")))
    };
    let mut h = coeffs;
    for l in 0..3 {
        h = g.linear(h, node(&weight(l))?, node(&bias(l))?)?;
        if l < 2 {
            h = g.relu(h)?;
        }
    }
    let logits = h;
    let c = g.shape(logits)[1] as f64;
    let p = g.softmax(logits)?;
    let p = g.add_scalar(p, lambda)?;
    let probs = g.scale(p, 1.0 / (1.0 + c * lambda))?;
    Ok(ClassifierNodes { logits, probs })
}

/// Plain smoothed softmax of one logit vector.
pub fn smoothed_softmax(logits: &[f64], lambda: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    let c = logits.len() as f64;
    e.iter().map(|v| (v / s + lambda) / (1.0 + c * lambda)).collect()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
