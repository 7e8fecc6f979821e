//! Functional samples, datasets, standardisation and gap filling.

mod io;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::spectral::BasisSet;

pub use io::{load_dataset, save_dataset, Sidecar, Splits};

/// Floor applied to per-entry standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Strictly increasing sample times on `[0, 1]` with both endpoints present.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(CoreError::Data("a time grid needs at least two points".into()));
        }
        if points[0] != 0.0 || points[points.len() - 1] != 1.0 {
            return Err(CoreError::Data("time grid must start at 0 and end at 1".into()));
        }
        if let Some(k) = points.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(CoreError::Data(format!(
                "time grid not strictly increasing at index {}",
                k + 1
            )));
        }
        Ok(Self { points })
    }

    /// `len` equally spaced points from 0 to 1.
    pub fn uniform(len: usize) -> Self {
        assert!(len >= 2, "uniform grid needs at least two points");
        let last = (len - 1) as f64;
        let mut points: Vec<f64> = (0..len).map(|k| k as f64 / last).collect();
        points[len - 1] = 1.0;
        Self { points }
    }

    /// Affinely maps raw timestamps onto `[0, 1]`.
    pub fn from_timestamps(raw: &[f64]) -> Result<Self> {
        if raw.len() < 2 || raw.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Data("timestamps must be finite and at least two".into()));
        }
        let (lo, hi) = (raw[0], raw[raw.len() - 1]);
        if !(hi > lo) {
            return Err(CoreError::Data("timestamps must increase".into()));
        }
        let mut points: Vec<f64> = raw.iter().map(|t| (t - lo) / (hi - lo)).collect();
        let last = points.len() - 1;
        points[0] = 0.0;
        points[last] = 1.0;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        let h = 1.0 / (self.len() - 1) as f64;
        self.points.windows(2).all(|w| ((w[1] - w[0]) - h).abs() < 1e-12)
    }
}

/// One observed curve with `d` channels on a shared grid. Missing entries are
/// stored as NaN and flagged in `missing`.
#[derive(Debug, Clone)]
pub struct FunctionalSample {
    pub grid: Arc<TimeGrid>,
    pub values: Vec<Vec<f64>>,
    pub label: usize,
    pub missing: Vec<Vec<bool>>,
}

impl FunctionalSample {
    pub fn new(grid: Arc<TimeGrid>, values: Vec<Vec<f64>>, label: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::Data("sample has no channels".into()));
        }
        for (c, ch) in values.iter().enumerate() {
            if ch.len() != grid.len() {
                return Err(CoreError::Data(format!(
                    "channel {c} has {} values for a grid of {}",
                    ch.len(),
                    grid.len()
                )));
            }
            if ch.iter().any(|v| v.is_infinite()) {
                return Err(CoreError::Data(format!("channel {c} contains an infinite value")));
            }
        }
        let missing = values
            .iter()
            .map(|ch| ch.iter().map(|v| v.is_nan()).collect())
            .collect();
        Ok(Self {
            grid,
            values,
            label,
            missing,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().flatten().any(|&m| m)
    }

    /// Bitwise equality of values (NaN-aware), labels and grids.
    pub fn same_as(&self, other: &Self) -> bool {
        self.label == other.label
            && self.grid == other.grid
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// A labelled collection of samples sharing the channel count.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<FunctionalSample>,
    num_classes: usize,
}

impl Dataset {
    /// Requires every class `0..num_classes` to occur and a common channel count.
    pub fn new(samples: Vec<FunctionalSample>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::Data("dataset is empty".into()));
        }
        let d = samples[0].channels();
        let mut counts = vec![0usize; num_classes];
        for (i, s) in samples.iter().enumerate() {
            if s.channels() != d {
                return Err(CoreError::Data(format!(
                    "sample {i} has {} channels, expected {d}",
                    s.channels()
                )));
            }
            if s.label >= num_classes {
                return Err(CoreError::Data(format!(
                    "sample {i} has label {} but only {num_classes} classes",
                    s.label
                )));
            }
            counts[s.label] += 1;
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(CoreError::Data(format!("class {j} has no samples")));
        }
        Ok(Self { samples, num_classes })
    }

    pub fn samples(&self) -> &[FunctionalSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.samples[0].channels()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// The grid every sample shares, or an error when grids differ.
    pub fn common_grid(&self) -> Result<Arc<TimeGrid>> {
        let g = &self.samples[0].grid;
        if self.samples.iter().all(|s| Arc::ptr_eq(&s.grid, g) || s.grid == *g) {
            Ok(g.clone())
        } else {
            Err(CoreError::Data("samples do not share a common time grid".into()))
        }
    }

    pub fn has_missing(&self) -> bool {
        self.samples.iter().any(FunctionalSample::has_missing)
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| CoreError::Data(format!("index {i} out of range for {} samples", self.len())))?;
            out.push(s.clone());
        }
        Dataset::new(out, self.num_classes)
    }

    /// Replaces every sample's values through `f`.
    pub fn map_values(&self, mut f: impl FnMut(&FunctionalSample) -> Vec<Vec<f64>>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| FunctionalSample::new(s.grid.clone(), f(s), s.label))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.num_classes)
    }
}

/// Per-channel, per-grid-index mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl Standardizer {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let grid = dataset.common_grid()?;
        if dataset.has_missing() {
            return Err(CoreError::Data(
                "standardisation needs complete samples; impute first".into(),
            ));
        }
        let (d, m, count) = (dataset.channels(), grid.len(), dataset.len() as f64);
        let mut mean = vec![vec![0.0; m]; d];
        let mut std = vec![vec![0.0; m]; d];
        for s in dataset.samples() {
            for (acc, ch) in mean.iter_mut().zip(&s.values) {
                for (a, v) in acc.iter_mut().zip(ch) {
                    *a += v;
                }
            }
        }
        mean.iter_mut().flatten().for_each(|v| *v /= count);
        for s in dataset.samples() {
            for ((acc, mu), ch) in std.iter_mut().zip(&mean).zip(&s.values) {
                for ((a, m), v) in acc.iter_mut().zip(mu).zip(ch) {
                    *a += (v - m) * (v - m);
                }
            }
        }
        std.iter_mut()
            .flatten()
            .for_each(|v| *v = (*v / count).sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(ch, (mu, sd))| {
                ch.iter()
                    .zip(mu.iter().zip(sd))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect()
    }

    pub fn invert(&self, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(ch, (mu, sd))| ch.iter().zip(mu.iter().zip(sd)).map(|(v, (m, s))| v * s + m).collect())
            .collect()
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        let grid = dataset.common_grid()?;
        if dataset.channels() != self.mean.len() || grid.len() != self.mean[0].len() {
            return Err(CoreError::Data(format!(
                "standardiser fitted for {} channels x {} points, data has {} x {}",
                self.mean.len(),
                self.mean[0].len(),
                dataset.channels(),
                grid.len()
            )));
        }
        Ok(())
    }

    pub fn transform(&self, dataset: &Dataset) -> Result<Dataset> {
        self.check(dataset)?;
        dataset.map_values(|s| self.apply(&s.values))
    }

    pub fn inverse_transform(&self, dataset: &Dataset) -> Result<Dataset> {
        self.check(dataset)?;
        dataset.map_values(|s| self.invert(&s.values))
    }
}

/// Entry-wise z-scoring; returns the scaled data and the fitted statistics.
pub fn standardize(dataset: &Dataset) -> Result<(Dataset, Standardizer)> {
    let st = Standardizer::fit(dataset)?;
    Ok((st.transform(dataset)?, st))
}

/// Rounds of gap re-estimation used by the Fourier smoothing step.
const SMOOTH_ROUNDS: usize = 25;

/// Fills missing entries by linear interpolation between the nearest observed
/// neighbours (constant extension past the ends). With `smooth_k > 0` the gap
/// entries are then refined by repeatedly projecting onto `smooth_k` Fourier
/// functions; observed entries are never changed.
pub fn impute_missing(sample: &FunctionalSample, smooth_k: usize) -> Result<FunctionalSample> {
    if !sample.has_missing() {
        return Ok(sample.clone());
    }
    let t = sample.grid.points();
    let basis = if smooth_k > 0 {
        Some(BasisSet::fourier(smooth_k, &sample.grid)?)
    } else {
        None
    };
    let mut values = Vec::with_capacity(sample.channels());
    for (c, (ch, mask)) in sample.values.iter().zip(&sample.missing).enumerate() {
        let observed: Vec<usize> = (0..ch.len()).filter(|&k| !mask[k]).collect();
        if observed.is_empty() {
            return Err(CoreError::Data(format!("channel {c} has no observed values")));
        }
        let mut filled = ch.clone();
        for k in 0..ch.len() {
            if !mask[k] {
                continue;
            }
            let right = observed.partition_point(|&j| j < k);
            filled[k] = match (right.checked_sub(1).map(|i| observed[i]), observed.get(right)) {
                (Some(l), Some(&r)) => {
                    let w = (t[k] - t[l]) / (t[r] - t[l]);
                    ch[l] + w * (ch[r] - ch[l])
                }
                (Some(l), None) => ch[l],
                (None, Some(&r)) => ch[r],
                (None, None) => unreachable!(),
            };
        }
        if let Some(basis) = &basis {
            for _ in 0..SMOOTH_ROUNDS {
                let smooth = basis.reconstruct(&basis.project(&filled)?)?;
                for k in 0..ch.len() {
                    if mask[k] {
                        filled[k] = smooth[k];
                    }
                }
            }
        }
        values.push(filled);
    }
    FunctionalSample::new(sample.grid.clone(), values, sample.label)
}

/// Applies [`impute_missing`] to every sample.
pub fn impute_dataset(dataset: &Dataset, smooth_k: usize) -> Result<Dataset> {
    let samples = dataset
        .samples()
        .iter()
        .map(|s| impute_missing(s, smooth_k))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, dataset.num_classes())
}
