//! Convolutional warp network and the monotone warp construction.

use std::collections::HashMap;

use deepfrc_tensor::{guard_warp_row, GraphBuilder, NodeId, Tensor, EPS_DIV};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::interp::linear;
use crate::params::{Group, ParamStore};

/// Default convolution widths.
pub const WIDTHS: [usize; 3] = [16, 32, 64];
/// Initial value of every warp-network bias.
pub const BIAS_INIT: f64 = 0.01;
/// Shortest grid the three pooling stages accept.
pub const MIN_POINTS: usize = 8;

/// Layer sizes of the warp network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpNetShape {
    pub channels: usize,
    pub widths: [usize; 3],
    /// Grid points per curve; the network emits `points - 1` values.
    pub points: usize,
}

impl WarpNetShape {
    pub fn new(channels: usize, points: usize) -> Self {
        Self {
            channels,
            widths: WIDTHS,
            points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.widths.contains(&0) {
            return Err(CoreError::Config("warp network needs non-zero channel counts".into()));
        }
        if self.points < MIN_POINTS {
            return Err(CoreError::Config(format!(
                "warp network needs at least {MIN_POINTS} grid points, got {}",
                self.points
            )));
        }
        Ok(())
    }
}

pub fn conv_weight(l: usize) -> String {
    format!("warp.conv{l}.weight")
}
pub fn conv_bias(l: usize) -> String {
    format!("warp.conv{l}.bias")
}
pub fn bn_scale(l: usize) -> String {
    format!("warp.bn{l}.scale")
}
pub fn bn_shift(l: usize) -> String {
    format!("warp.bn{l}.shift")
}
pub const FC_WEIGHT: &str = "warp.fc.weight";
pub const FC_BIAS: &str = "warp.fc.bias";

/// Adds freshly initialised warp-network parameters to `store`.
pub fn init_params(store: &mut ParamStore, shape: &WarpNetShape, rng: &mut impl Rng) -> Result<()> {
    shape.validate()?;
    let g = Group::Registration;
    let mut fan = shape.channels;
    for (l, &w) in shape.widths.iter().enumerate() {
        store.push_uniform(rng, &conv_weight(l), g, &[w, fan, 3], (1.0 / (3 * fan) as f64).sqrt());
        store.push_constant(&conv_bias(l), g, &[w], BIAS_INIT);
        store.push_constant(&bn_scale(l), g, &[w], 1.0);
        store.push_constant(&bn_shift(l), g, &[w], 0.0);
        fan = w;
    }
    let n = shape.points - 1;
    store.push_uniform(rng, FC_WEIGHT, g, &[n, fan], (1.0 / fan as f64).sqrt());
    store.push_constant(FC_BIAS, g, &[n], BIAS_INIT);
    Ok(())
}

/// Running batch-norm statistics, one vector per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl BnRunning {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(shape: &WarpNetShape) -> Self {
        Self {
            mean: shape.widths.iter().map(|&w| vec![0.0; w]).collect(),
            var: shape.widths.iter().map(|&w| vec![1.0; w]).collect(),
        }
    }

    /// Exponential update from biased batch statistics over `count` values.
    pub fn update(&mut self, block: usize, count: usize, mean: &[f64], var: &[f64]) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = Self::MOMENTUM;
        for (r, &b) in self.mean[block].iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.var[block].iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

/// Which statistics batch normalisation uses.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Batch,
    Running(&'a BnRunning),
}

/// Output of [`feature_forward`].
pub struct FeatureNodes {
    /// Non-negative warp increments `[B, n]`.
    pub tau: NodeId,
    /// The batch-norm nodes in block order.
    pub bn: Vec<NodeId>,
}

fn param(p: &HashMap<String, NodeId>, name: &str) -> Result<NodeId> {
    p.get(name)
        .copied()
        .ok_or_else(|| CoreError::Config(format!("missing parameter node {name}")))
}

/// Three conv → ReLU → max-pool → batch-norm blocks, global average, then an
/// affine map with ReLU. `x` is `[B, d, m]`.
pub fn feature_forward(
    g: &mut GraphBuilder,
    x: NodeId,
    params: &HashMap<String, NodeId>,
    mode: BnMode,
) -> Result<FeatureNodes> {
    let mut h = x;
    let mut bn = Vec::with_capacity(3);
    for l in 0..3 {
        h = g.conv1d(h, param(params, &conv_weight(l))?, param(params, &conv_bias(l))?)?;
        h = g.relu(h)?;
        h = g.max_pool(h)?;
        let (scale, shift) = (param(params, &bn_scale(l))?, param(params, &bn_shift(l))?);
        h = match mode {
            BnMode::Batch => g.batch_norm_train(h, scale, shift)?,
            BnMode::Running(r) => {
                let mean = g.constant(Tensor::vector(r.mean[l].clone()));
                let var = g.constant(Tensor::vector(r.var[l].clone()));
                g.batch_norm_eval(h, scale, shift, mean, var)?
            }
        };
        bn.push(h);
    }
    let pooled = g.global_avg(h)?;
    let out = g.linear(pooled, param(params, FC_WEIGHT)?, param(params, FC_BIAS)?)?;
    Ok(FeatureNodes { tau: g.relu(out)?, bn })
}

/// Normalised double cumulative sum of squared increments, guarded to stay
/// strictly increasing. `tau [B, n]` -> `[B, n+1]`.
pub fn build_warp_node(g: &mut GraphBuilder, tau: NodeId, grid: &[f64]) -> Result<NodeId> {
    let m = grid.len();
    let padded = g.pad_front(tau, 1)?;
    let sq = g.square(padded)?;
    let mut h = g.cumsum(sq)?;
    for pass in 0..2 {
        if pass == 1 {
            h = g.cumsum(h)?;
        }
        let total = g.slice_last(h, m - 1, m)?;
        h = g.div_clamped(h, total)?;
    }
    Ok(g.warp_guard(h, grid)?)
}

/// Curves `[B, D, m]` through knots `(γ, x)` read back on the grid `knots [B, m]`.
pub fn apply_warp_node(g: &mut GraphBuilder, values: NodeId, warp: NodeId, knots: NodeId) -> Result<NodeId> {
    Ok(g.interp(warp, values, knots)?)
}

/// Inverse warp on the grid, `[B, m]`. `grid_curve` is the grid as `[B, 1, m]`.
pub fn inverse_warp_node(g: &mut GraphBuilder, warp: NodeId, grid_curve: NodeId, knots: NodeId) -> Result<NodeId> {
    let shape = g.shape(warp).to_vec();
    let inv = g.interp(warp, grid_curve, knots)?;
    Ok(g.reshape(inv, &shape)?)
}

/// Warp values on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpFunction {
    pub gamma: Vec<f64>,
}

impl WarpFunction {
    pub fn identity(grid: &[f64]) -> Self {
        Self { gamma: grid.to_vec() }
    }

    /// Endpoints match the grid and every step is positive.
    pub fn validate(&self, grid: &[f64]) -> Result<()> {
        let g = &self.gamma;
        if g.len() != grid.len() || g.len() < 2 {
            return Err(CoreError::Numerical("warp length does not match the grid".into()));
        }
        if g[0] != grid[0] || g[g.len() - 1] != grid[grid.len() - 1] {
            return Err(CoreError::Numerical(format!(
                "warp endpoints {} and {} do not match the grid",
                g[0],
                g[g.len() - 1]
            )));
        }
        if let Some(k) = g.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(CoreError::Numerical(format!("warp not increasing at step {k}")));
        }
        Ok(())
    }

    pub fn inverse(&self, grid: &[f64]) -> WarpFunction {
        WarpFunction {
            gamma: invert_warp(&self.gamma, grid),
        }
    }
}

/// Plain evaluation of [`build_warp_node`] on a unit-interval grid. Returns
/// the warp and whether the guard fired.
pub fn build_warp(tau: &[f64], grid: &[f64]) -> Result<(WarpFunction, bool)> {
    if tau.len() + 1 != grid.len() {
        return Err(CoreError::Config(format!(
            "{} increments for {} grid points",
            tau.len(),
            grid.len()
        )));
    }
    if tau.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical("non-finite warp increments".into()));
    }
    let mut h = Vec::with_capacity(grid.len());
    h.push(0.0);
    let mut acc = 0.0;
    for v in tau {
        acc += v * v;
        h.push(acc);
    }
    normalise(&mut h);
    let mut acc = 0.0;
    for v in h.iter_mut() {
        acc += *v;
        *v = acc;
    }
    normalise(&mut h);
    let fired = guard_warp_row(&mut h, grid);
    Ok((WarpFunction { gamma: h }, fired))
}

fn normalise(v: &mut [f64]) {
    let total = v[v.len() - 1].max(EPS_DIV);
    v.iter_mut().for_each(|x| *x /= total);
}

/// Aligned channels: the interpolant through `(γ(t_k), x(t_k))` read at the
/// grid. Nearly flat warps get the same minimal ramp as the graph version.
pub fn apply_warp(channels: &[Vec<f64>], gamma: &[f64], grid: &[f64]) -> Vec<Vec<f64>> {
    let mut knots = gamma.to_vec();
    guard_warp_row(&mut knots, grid);
    channels.iter().map(|x| linear(&knots, x, grid)).collect()
}

/// Piecewise-linear inverse of a warp on the grid.
pub fn invert_warp(gamma: &[f64], grid: &[f64]) -> Vec<f64> {
    linear(gamma, grid, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(m: usize) -> Vec<f64> {
        (0..m).map(|k| k as f64 / (m - 1) as f64).collect()
    }

    #[test]
    fn equal_increments_give_triangular_warp() {
        let n = 6;
        let t = uniform(n + 1);
        let (w, fired) = build_warp(&[0.7; 6], &t).unwrap();
        assert!(!fired);
        for (j, g) in w.gamma.iter().enumerate() {
            let expected = (j * (j + 1)) as f64 / (n * (n + 1)) as f64;
            assert!((g - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_increments_fall_back_to_identity() {
        let t = uniform(9);
        let (w, fired) = build_warp(&[0.0; 8], &t).unwrap();
        assert!(fired);
        w.validate(&t).unwrap();
        for (g, s) in w.gamma.iter().zip(&t) {
            assert!((g - s).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_line_cases() {
        let t = uniform(5);
        let x = vec![vec![3.0, 1.0, 4.0, 1.0, 5.0]];
        assert_eq!(apply_warp(&x, &t, &t), x);
        let gamma = [0.0, 0.1, 0.3, 0.6, 1.0];
        let out = apply_warp(std::slice::from_ref(&t), &gamma, &t);
        let inv = [0.0, 0.4375, 0.5 + 0.25 * 2.0 / 3.0, 0.84375, 1.0];
        for (o, e) in out[0].iter().zip(inv) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn running_stats_update() {
        let shape = WarpNetShape {
            channels: 1,
            widths: [1, 1, 1],
            points: 8,
        };
        let mut r = BnRunning::new(&shape);
        r.update(0, 5, &[2.0], &[4.0]);
        assert!((r.mean[0][0] - 0.2).abs() < 1e-15);
        assert!((r.var[0][0] - (0.9 + 0.1 * 5.0)).abs() < 1e-15);
    }

    #[test]
    fn short_grids_rejected() {
        assert!(WarpNetShape::new(1, 7).validate().is_err());
        assert!(WarpNetShape::new(1, 8).validate().is_ok());
    }
}
