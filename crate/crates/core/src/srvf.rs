//! Square-root velocity functions, their reparameterisation and class means.

use std::collections::HashMap;

use deepfrc_tensor::{GraphBuilder, NodeId, Session, Tensor, EPS_DIV};

use crate::error::{CoreError, Result};
use crate::interp::{central_diff, linear, linear_at};

/// `sign(ẋ) √|ẋ|` with the derivative from [`central_diff`].
pub fn srvf_transform(values: &[f64], t: &[f64]) -> Vec<f64> {
    central_diff(values, t)
        .into_iter()
        .map(|d| d.signum() * d.abs().sqrt())
        .collect()
}

/// SRVF of every channel, concatenated.
pub fn srvf_channels(channels: &[Vec<f64>], t: &[f64]) -> Vec<f64> {
    channels.iter().flat_map(|ch| srvf_transform(ch, t)).collect()
}

fn warp_slope(gamma: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    if let Some(k) = gamma.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(CoreError::Numerical(format!("warp is not increasing after index {k}")));
    }
    let slope = central_diff(gamma, t);
    if let Some(k) = slope.iter().position(|&s| !(s > 0.0)) {
        return Err(CoreError::Numerical(format!(
            "warp is not increasing at index {k} (slope {:e})",
            slope[k]
        )));
    }
    Ok(slope)
}

/// `(q ∘ γ) √γ̇` on the grid, with `q ∘ γ` by linear interpolation and `γ̇`
/// by central differences.
pub fn warped_srvf(q: &[f64], gamma: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    let slope = warp_slope(gamma, t)?;
    Ok(gamma
        .iter()
        .zip(&slope)
        .map(|(&g, &s)| linear_at(t, q, g) * s.sqrt())
        .collect())
}

/// [`warped_srvf`] applied to each length-`m` channel block of `q`.
pub fn warped_srvf_channels(q: &[f64], gamma: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    let m = t.len();
    let mut out = Vec::with_capacity(q.len());
    for block in q.chunks(m) {
        out.extend(warped_srvf(block, gamma, t)?);
    }
    Ok(out)
}

/// Closed-form sensitivity of the warped SRVF:
/// `q̇(γ) √γ̇ + q(γ) γ̈ / (2 √γ̇)`, with every derivative by central differences.
pub fn warped_srvf_grad_oracle(q: &[f64], gamma: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    let slope = central_diff(gamma, t);
    if let Some(k) = slope.iter().position(|&s| s < EPS_DIV) {
        return Err(CoreError::Numerical(format!(
            "warp slope {:e} at index {k} below guard",
            slope[k]
        )));
    }
    let curvature = central_diff(&slope, t);
    let dq = central_diff(q, t);
    Ok((0..t.len())
        .map(|k| {
            let root = slope[k].sqrt();
            linear_at(t, &dq, gamma[k]) * root + linear_at(t, q, gamma[k]) * curvature[k] / (2.0 * root)
        })
        .collect())
}

/// The same sensitivity obtained by reverse-mode differentiation of the
/// discretised map `(γ, γ̇) -> interp(q, γ) √γ̇`: the derivative along the
/// direction `(1, γ̈)`.
pub fn warped_srvf_grad_autodiff(q: &[f64], gamma: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    let m = t.len();
    let slope = warp_slope(gamma, t)?;
    let curvature = central_diff(&slope, t);
    let mut g = GraphBuilder::new();
    let knots = g.constant(Tensor::new(vec![1, m], t.to_vec())?);
    let values = g.constant(Tensor::new(vec![1, 1, m], q.to_vec())?);
    let warp = g.input("warp", &[1, m], true)?;
    let rate = g.input("rate", &[1, m], true)?;
    let composed = g.interp(knots, values, warp)?;
    let composed = g.reshape(composed, &[1, m])?;
    let root = g.sqrt(rate)?;
    let out = g.mul(composed, root)?;
    let total = g.sum(out)?;
    let graph = g.build();
    let mut s = Session::new(&graph);
    let inputs = HashMap::from([
        ("warp".to_string(), Tensor::new(vec![1, m], gamma.to_vec())?),
        ("rate".to_string(), Tensor::new(vec![1, m], slope)?),
    ]);
    s.forward(inputs)?;
    let grads = s.backward(total)?;
    let (gw, gr) = (grads["warp"].data(), grads["rate"].data());
    Ok((0..m).map(|k| gw[k] + gr[k] * curvature[k]).collect())
}

/// Graph form of the warped SRVF for a batch: `q [B, D, m]`, warps `[B, m]`,
/// `knots [B, m]` (the grid repeated per row). Returns `[B, D·m]`.
pub fn warped_srvf_node(g: &mut GraphBuilder, q: NodeId, warp: NodeId, knots: NodeId, t: &[f64]) -> Result<NodeId> {
    let shape = g.shape(q).to_vec();
    let (b, d, m) = (shape[0], shape[1], shape[2]);
    let slope = g.central_diff(warp, t)?;
    let root = g.sqrt(slope)?;
    let root = g.reshape(root, &[b, 1, m])?;
    let composed = g.interp(knots, q, warp)?;
    let out = g.mul(composed, root)?;
    Ok(g.reshape(out, &[b, d * m])?)
}

/// Per-class arithmetic means of SRVF vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ClassMeans {
    pub fn get(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }
}

pub fn class_means(vectors: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<ClassMeans> {
    if vectors.len() != labels.len() || vectors.is_empty() {
        return Err(CoreError::Data(
            "need one label per vector and at least one vector".into(),
        ));
    }
    let len = vectors[0].len();
    let mut sums = vec![vec![0.0; len]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (v, &y) in vectors.iter().zip(labels) {
        if y >= num_classes || v.len() != len {
            return Err(CoreError::Data(format!("bad vector or label {y}")));
        }
        counts[y] += 1;
        for (s, x) in sums[y].iter_mut().zip(v) {
            *s += x;
        }
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(CoreError::Data(format!("class {j} is empty")));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(ClassMeans { means: sums, counts })
}

/// Inverse of a warp by swapping the roles of grid and warp values.
pub fn inverse_on_grid(gamma: &[f64], t: &[f64]) -> Vec<f64> {
    linear(gamma, t, t)
}
