//! Alignment loss, cross-entropy and their weighted combination.

use deepfrc_tensor::{GraphBuilder, NodeId, Tensor, EPS_DIV};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Loss components of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub intra: f64,
    pub separation: f64,
    pub cross_entropy: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(intra: f64, separation: f64, cross_entropy: f64, alpha: f64, beta: f64) -> Self {
        Self {
            intra,
            separation,
            cross_entropy,
            total: total_loss(intra, separation, cross_entropy, alpha, beta),
            alpha,
            beta,
        }
    }
}

/// `(intra + α·separation) + β·cross_entropy`.
pub fn total_loss(intra: f64, separation: f64, cross_entropy: f64, alpha: f64, beta: f64) -> f64 {
    (intra + alpha * separation) + beta * cross_entropy
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Result of [`alignment_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentLoss {
    pub intra: f64,
    pub separation: f64,
    /// Some pair of class means was closer than `EPS_DIV`.
    pub degenerate: bool,
}

/// Within-class spread around the supplied means (averaged per class, summed
/// over classes) and the sum of inverse distances between means recomputed
/// from `q`. Classes with no member in `q` use the supplied mean in the
/// separation term and contribute nothing to the spread.
pub fn alignment_loss(q: &[Vec<f64>], labels: &[usize], means: &[Vec<f64>]) -> Result<AlignmentLoss> {
    let c = means.len();
    if c == 0 || q.len() != labels.len() || q.is_empty() {
        return Err(CoreError::Data(
            "alignment loss needs classes and one label per vector".into(),
        ));
    }
    let len = means[0].len();
    let mut counts = vec![0usize; c];
    let mut sums = vec![vec![0.0; len]; c];
    for (v, &y) in q.iter().zip(labels) {
        if y >= c || v.len() != len {
            return Err(CoreError::Data(format!(
                "label {y} or vector length {} out of range",
                v.len()
            )));
        }
        counts[y] += 1;
        sums[y].iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let intra = q
        .iter()
        .zip(labels)
        .map(|(v, &y)| euclid(v, &means[y]) / counts[y] as f64)
        .sum();
    let batch_means: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            if counts[j] == 0 {
                means[j].clone()
            } else {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            }
        })
        .collect();
    let mut separation = 0.0;
    let mut degenerate = false;
    for u in 0..c {
        for v in u + 1..c {
            let d = euclid(&batch_means[u], &batch_means[v]);
            degenerate |= d < EPS_DIV;
            separation += 1.0 / d.max(EPS_DIV);
        }
    }
    Ok(AlignmentLoss {
        intra,
        separation,
        degenerate,
    })
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(CoreError::Data(
            "cross-entropy needs one label per probability vector".into(),
        ));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let v = *p
            .get(y)
            .ok_or_else(|| CoreError::Data(format!("label {y} outside {} classes", p.len())))?;
        total -= v.ln();
    }
    Ok(total / probs.len() as f64)
}

/// Constants describing the class layout of one batch.
#[derive(Debug, Clone)]
pub struct BatchLayout {
    pub num_classes: usize,
    /// Members per class in the batch.
    pub counts: Vec<usize>,
    /// `[B, C]`.
    pub onehot: Tensor,
    /// `1 / count` of each sample's class, `[B]`.
    pub weights: Tensor,
    /// Row `j` averages the class-`j` rows of a `[B, L]` matrix, `[C, B]`.
    pub averaging: Tensor,
    /// Pair differences `e_u - e_v` for `u < v`, `[P, C]`; `None` when `C = 1`.
    pub pairs: Option<Tensor>,
}

impl BatchLayout {
    pub fn new(labels: &[usize], num_classes: usize) -> Result<Self> {
        let b = labels.len();
        if b == 0 || num_classes == 0 || labels.iter().any(|&y| y >= num_classes) {
            return Err(CoreError::Data("batch labels out of range".into()));
        }
        let c = num_classes;
        let mut counts = vec![0usize; c];
        labels.iter().for_each(|&y| counts[y] += 1);
        let mut onehot = vec![0.0; b * c];
        let mut averaging = vec![0.0; c * b];
        let mut weights = vec![0.0; b];
        for (i, &y) in labels.iter().enumerate() {
            onehot[i * c + y] = 1.0;
            let w = 1.0 / counts[y] as f64;
            averaging[y * b + i] = w;
            weights[i] = w;
        }
        let pairs = (c > 1).then(|| {
            let mut d = Vec::new();
            for u in 0..c {
                for v in u + 1..c {
                    let mut row = vec![0.0; c];
                    row[u] = 1.0;
                    row[v] = -1.0;
                    d.extend(row);
                }
            }
            Tensor::new(vec![c * (c - 1) / 2, c], d).expect("pair matrix shape")
        });
        Ok(Self {
            num_classes,
            counts,
            onehot: Tensor::new(vec![b, c], onehot)?,
            weights: Tensor::new(vec![b], weights)?,
            averaging: Tensor::new(vec![c, b], averaging)?,
            pairs,
        })
    }

    /// Means of classes absent from the batch, zero rows elsewhere, `[C, L]`.
    pub fn absent_means(&self, means: &[Vec<f64>]) -> Tensor {
        let len = means[0].len();
        let mut data = vec![0.0; self.num_classes * len];
        for (j, m) in means.iter().enumerate() {
            if self.counts[j] == 0 {
                data[j * len..(j + 1) * len].copy_from_slice(m);
            }
        }
        Tensor::new(vec![self.num_classes, len], data).expect("absent mean shape")
    }
}

/// `Σ_i w_i ‖q_i − m_i‖` with `means [B, L]` treated as constant.
pub fn intra_node(g: &mut GraphBuilder, q: NodeId, means: NodeId, weights: NodeId) -> Result<NodeId> {
    let fixed = g.detach(means)?;
    let diff = g.sub(q, fixed)?;
    let dist = g.norm(diff)?;
    let weighted = g.mul(dist, weights)?;
    Ok(g.sum(weighted)?)
}

/// `Σ_{u<v} 1 / max(‖m_u − m_v‖, ε)` over batch class means; `None` with one class.
pub fn separation_node(
    g: &mut GraphBuilder,
    q: NodeId,
    layout: &BatchLayout,
    absent: NodeId,
    differentiate: bool,
) -> Result<Option<NodeId>> {
    let Some(pairs) = &layout.pairs else {
        return Ok(None);
    };
    let q = if differentiate { q } else { g.detach(q)? };
    let avg = g.constant(layout.averaging.clone());
    let means = g.matmul(avg, q)?;
    let means = g.add(means, absent)?;
    let d = g.constant(pairs.clone());
    let diffs = g.matmul(d, means)?;
    let dist = g.norm(diffs)?;
    let inv = g.reciprocal(dist)?;
    Ok(Some(g.sum(inv)?))
}

/// `-(1/B) Σ onehot · log p`.
pub fn cross_entropy_node(g: &mut GraphBuilder, probs: NodeId, onehot: NodeId) -> Result<NodeId> {
    let b = g.shape(probs)[0] as f64;
    let logp = g.log(probs)?;
    let picked = g.mul(logp, onehot)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / b)?)
}
