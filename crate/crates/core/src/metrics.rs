//! Registration, representation and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Inference, Model, Prepared};
use crate::spectral::trapezoid_weights;
use crate::srvf::warped_srvf_channels;

/// Norm applied to SRVF vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum SrvfNorm {
    /// Plain Euclidean norm of the concatenated grid values.
    Euclidean,
    /// Trapezoidal L² norm on the grid, summed over channels.
    Quadrature(Vec<f64>),
}

impl SrvfNorm {
    pub fn quadrature(t: &[f64]) -> Self {
        SrvfNorm::Quadrature(trapezoid_weights(t))
    }

    fn dist(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            SrvfNorm::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            SrvfNorm::Quadrature(w) => a
                .iter()
                .zip(b)
                .zip(w.iter().cycle())
                .map(|((x, y), w)| w * (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

fn class_members(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members
            .get_mut(y)
            .ok_or_else(|| CoreError::Data(format!("label {y} outside {num_classes} classes")))?
            .push(i);
    }
    Ok(members)
}

fn mean_of(rows: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; rows[idx[0]].len()];
    for &i in idx {
        m.iter_mut().zip(&rows[i]).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= idx.len() as f64);
    m
}

/// `Σ_j mean_{i ∈ j} ‖Q_i − Q̄_j‖` over the given warped SRVFs.
pub fn q_reg(srvf: &[Vec<f64>], labels: &[usize], num_classes: usize, norm: &SrvfNorm) -> Result<f64> {
    if srvf.len() != labels.len() {
        return Err(CoreError::Data("one label per SRVF vector required".into()));
    }
    let mut total = 0.0;
    for (j, idx) in class_members(labels, num_classes)?.iter().enumerate() {
        if idx.is_empty() {
            return Err(CoreError::Data(format!("class {j} is empty")));
        }
        let mean = mean_of(srvf, idx);
        total += idx.iter().map(|&i| norm.dist(&srvf[i], &mean)).sum::<f64>() / idx.len() as f64;
    }
    Ok(total)
}

/// SRVFs `q_i` (each `d·m`) reparameterised by per-sample warps.
pub fn warp_srvfs(srvf: &[Vec<f64>], warps: &[Vec<f64>], t: &[f64]) -> Result<Vec<Vec<f64>>> {
    if srvf.len() != warps.len() {
        return Err(CoreError::Data("one warp per SRVF required".into()));
    }
    srvf.iter()
        .zip(warps)
        .map(|(q, w)| warped_srvf_channels(q, w, t))
        .collect()
}

/// `|q_reg(reference) − q_reg(learned)|`, both warps acting on the SRVFs.
pub fn registration_error(
    srvf: &[Vec<f64>],
    reference: &[Vec<f64>],
    learned: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    t: &[f64],
    norm: &SrvfNorm,
) -> Result<f64> {
    let a = q_reg(&warp_srvfs(srvf, reference, t)?, labels, num_classes, norm)?;
    let b = q_reg(&warp_srvfs(srvf, learned, t)?, labels, num_classes, norm)?;
    Ok((a - b).abs())
}

/// Mean over class pairs of (integrated pooled within-class variance) /
/// (L² distance between the class means). Curves are `d·m` rows on grid `t`.
pub fn atv(curves: &[Vec<f64>], labels: &[usize], num_classes: usize, t: &[f64]) -> Result<f64> {
    if num_classes < 2 {
        return Err(CoreError::Data("ATV needs at least two classes".into()));
    }
    if curves.len() != labels.len() || curves.is_empty() {
        return Err(CoreError::Data("one label per curve required".into()));
    }
    let w = trapezoid_weights(t);
    let members = class_members(labels, num_classes)?;
    if let Some(j) = members.iter().position(Vec::is_empty) {
        return Err(CoreError::Data(format!("class {j} is empty")));
    }
    let means: Vec<Vec<f64>> = members.iter().map(|idx| mean_of(curves, idx)).collect();
    let ss: Vec<Vec<f64>> = members
        .iter()
        .zip(&means)
        .map(|(idx, mu)| {
            let mut acc = vec![0.0; mu.len()];
            for &i in idx {
                for ((a, x), m) in acc.iter_mut().zip(&curves[i]).zip(mu) {
                    *a += (x - m) * (x - m);
                }
            }
            acc
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for u in 0..num_classes {
        for v in u + 1..num_classes {
            let dof = members[u].len() + members[v].len();
            if dof <= 2 {
                return Err(CoreError::Data("ATV needs more than two curves per class pair".into()));
            }
            let denom = (dof - 2) as f64;
            let tv: f64 = ss[u]
                .iter()
                .zip(&ss[v])
                .zip(w.iter().cycle())
                .map(|((a, b), w)| w * (a + b) / denom)
                .sum();
            let d = means[u]
                .iter()
                .zip(&means[v])
                .zip(w.iter().cycle())
                .map(|((a, b), w)| w * (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < deepfrc_tensor::EPS_DIV {
                return Err(CoreError::Numerical(format!("class means {u} and {v} coincide")));
            }
            total += tv / d;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Pearson correlation over all pooled (sample, coefficient) pairs.
pub fn coeff_correlation(reference: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.iter().zip(estimate).any(|(a, b)| a.len() != b.len()) {
        return Err(CoreError::Data("coefficient arrays differ in shape".into()));
    }
    let a: Vec<f64> = reference.concat();
    let b: Vec<f64> = estimate.concat();
    if a.is_empty() {
        return Err(CoreError::Data("no coefficients".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CoreError::Numerical("zero variance in a coefficient set".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

/// Accuracy, macro-F1 and per-class scores over `num_classes` classes.
pub fn classification_metrics(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<ClassificationReport> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(CoreError::Data("need equally many predictions and labels".into()));
    }
    if predicted.iter().chain(truth).any(|&y| y >= num_classes) {
        return Err(CoreError::Data("label outside the class range".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &y) in predicted.iter().zip(truth) {
        pred_count[p] += 1;
        support[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassScore> = (0..num_classes)
        .map(|j| {
            let precision = ratio(tp[j], pred_count[j]);
            let recall = ratio(tp[j], support[j]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScore {
                precision,
                recall,
                f1,
                support: support[j],
            }
        })
        .collect();
    Ok(ClassificationReport {
        accuracy: tp.iter().sum::<usize>() as f64 / predicted.len() as f64,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / num_classes as f64,
        per_class,
    })
}

/// Reference quantities known for synthetic data, aligned with the
/// evaluated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Warps acting on the SRVFs (inverses of the applied warps).
    pub srvf_warps: Vec<Vec<f64>>,
    /// Coefficients of the unwarped curves in the model basis.
    pub coefficients: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub q_reg: f64,
    pub delta_q_reg: Option<f64>,
    pub atv: Option<f64>,
    pub rho: Option<f64>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 7] = ["samples", "q_reg", "delta_q_reg", "atv", "rho", "accuracy", "macro_f1"];

    /// Values in [`Self::CSV_HEADER`] order; missing entries are empty.
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.samples.to_string(),
            self.q_reg.to_string(),
            opt(self.delta_q_reg),
            opt(self.atv),
            opt(self.rho),
            self.accuracy.to_string(),
            self.macro_f1.to_string(),
        ]
    }
}

/// The norm used for reported SRVF quantities.
pub fn report_norm(t: &[f64]) -> SrvfNorm {
    SrvfNorm::quadrature(t)
}

/// Metrics for inference outputs over prepared samples.
pub fn report(
    model: &Model,
    data: &Prepared,
    idx: &[usize],
    inf: &Inference,
    reference: Option<&Reference>,
) -> Result<MetricsReport> {
    let c = model.spec.classes;
    let t = &model.grid;
    let norm = report_norm(t);
    let labels = &inf.labels;
    let (lab, present) = compact(labels, c);
    let q = q_reg(&inf.srvf, &lab, present, &norm)?;
    let cls = classification_metrics(&inf.predictions, labels, c)?;
    let atv = if present >= 2 {
        Some(atv(&inf.aligned, &lab, present, t)?)
    } else {
        None
    };
    let (delta, rho) = match reference {
        Some(r) => {
            let srvf: Vec<Vec<f64>> = idx.iter().map(|&i| data.srvf[i].clone()).collect();
            let reference_q = q_reg(&warp_srvfs(&srvf, &r.srvf_warps, t)?, &lab, present, &norm)?;
            (
                Some((reference_q - q).abs()),
                Some(coeff_correlation(&r.coefficients, &inf.coefficients)?),
            )
        }
        None => (None, None),
    };
    Ok(MetricsReport {
        samples: inf.labels.len(),
        q_reg: q,
        delta_q_reg: delta,
        atv,
        rho,
        accuracy: cls.accuracy,
        macro_f1: cls.macro_f1,
        per_class: cls.per_class,
    })
}

/// Relabels the present classes consecutively; returns the labels and the
/// number of present classes.
fn compact(labels: &[usize], c: usize) -> (Vec<usize>, usize) {
    let mut map = vec![usize::MAX; c];
    let mut next = 0;
    for (j, slot) in map.iter_mut().enumerate() {
        if labels.contains(&j) {
            *slot = next;
            next += 1;
        }
    }
    (labels.iter().map(|&y| map[y]).collect(), next)
}
