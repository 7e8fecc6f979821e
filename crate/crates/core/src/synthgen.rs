//! Two-class benchmark of warped Gaussian bumps with known ground truth.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fdata::{Dataset, FunctionalSample, Splits, TimeGrid};
use crate::metrics::Reference;
use crate::spectral::BasisSet;

/// `a · exp(-(t - μ)² / (2σ²))`.
pub fn gaussian_bump(t: f64, a: f64, mu: f64, sigma: f64) -> f64 {
    let z = (t - mu) / sigma;
    a * (-0.5 * z * z).exp()
}

/// `(e^{bt} - 1) / (e^b - 1)`, or `t` when `b = 0`.
pub fn exp_warp(t: f64, b: f64) -> f64 {
    if b == 0.0 {
        t
    } else {
        (b * t).exp_m1() / b.exp_m1()
    }
}

/// One bump of a class template: centre fixed, amplitude and width drawn
/// uniformly around their nominal values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub amplitude: f64,
    pub amplitude_spread: f64,
    pub center: f64,
    pub width: f64,
    pub width_spread: f64,
}

impl BumpSpec {
    const fn new(amplitude: f64, amplitude_spread: f64, center: f64, width: f64, width_spread: f64) -> Self {
        Self {
            amplitude,
            amplitude_spread,
            center,
            width,
            width_spread,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Grid points per curve.
    pub n_points: usize,
    /// Two bumps per class.
    pub classes: Vec<[BumpSpec; 2]>,
    /// Warp parameters are drawn from `U(-warp_range, warp_range)`.
    pub warp_range: f64,
    pub noise_std: f64,
    /// Train, validation and test sizes, taken in order.
    pub splits: [usize; 3],
    pub seed: u64,
    /// Basis size for the reference coefficients.
    pub coeff_k: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 6000,
            n_points: 1000,
            classes: vec![
                [
                    BumpSpec::new(13.0, 0.5, 0.25, 0.06, 0.003),
                    BumpSpec::new(12.5, 1.0, 0.715, 0.075, 0.003),
                ],
                [
                    BumpSpec::new(12.0, 1.0, 0.225, 0.06, 0.003),
                    BumpSpec::new(13.0, 1.5, 0.695, 0.1, 0.003),
                ],
            ],
            warp_range: 1.5,
            noise_std: 0.0,
            splits: [1600, 400, 4000],
            seed: 0,
            coeff_k: 100,
        }
    }
}

impl SynthConfig {
    /// Smaller configuration with the same generative model.
    pub fn scaled(train: usize, val: usize, test: usize, n_points: usize) -> Self {
        Self {
            n_samples: train + val + test,
            n_points,
            splits: [train, val, test],
            coeff_k: 100.min((n_points - 1) / 2).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.classes.is_empty() {
            return err("at least one class is required");
        }
        if self.n_samples < self.classes.len() {
            return err("fewer samples than classes");
        }
        if self.n_points < 3 {
            return err("curves need at least three grid points");
        }
        if self.splits.iter().sum::<usize>() > self.n_samples {
            return err("split sizes exceed the sample count");
        }
        for bump in self.classes.iter().flatten() {
            if !(bump.width - bump.width_spread > 0.0) || bump.amplitude_spread < 0.0 || bump.width_spread < 0.0 {
                return err("bump widths must stay positive and spreads non-negative");
            }
        }
        if !(self.warp_range >= 0.0) || !(self.noise_std >= 0.0) {
            return err("warp range and noise level must be non-negative");
        }
        if self.coeff_k == 0 || self.coeff_k > self.n_points - 1 {
            return err("reference basis size must be in 1..n_points-1");
        }
        Ok(())
    }
}

/// Per-sample draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub amplitudes: [f64; 2],
    pub widths: [f64; 2],
    pub warp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: Vec<SampleParams>,
    /// Unwarped curves on the grid.
    pub latent: Vec<Vec<f64>>,
    /// Applied warps on the grid: observed = latent ∘ warp.
    pub warps: Vec<Vec<f64>>,
    /// Basis coefficients of the latent curves.
    pub coeff_k: usize,
    pub coefficients: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Restricts to the given sample indices.
    pub fn subset(&self, indices: &[usize]) -> GroundTruth {
        GroundTruth {
            params: indices.iter().map(|&i| self.params[i]).collect(),
            latent: indices.iter().map(|&i| self.latent[i].clone()).collect(),
            warps: indices.iter().map(|&i| self.warps[i].clone()).collect(),
            coeff_k: self.coeff_k,
            coefficients: indices.iter().map(|&i| self.coefficients[i].clone()).collect(),
        }
    }

    /// Inverses of the applied warps on `grid`, the reference warps for
    /// registration error.
    pub fn inverse_warps(&self, grid: &TimeGrid) -> Vec<Vec<f64>> {
        self.warps
            .iter()
            .map(|w| crate::warpnet::invert_warp(w, grid.points()))
            .collect()
    }

    /// Coefficients of the latent curves in an arbitrary basis.
    pub fn coefficients_in(&self, basis: &BasisSet) -> Result<Vec<Vec<f64>>> {
        self.latent.iter().map(|z| basis.project(z)).collect()
    }

    /// Reference warps and coefficients for a model with `basis_k` Fourier
    /// functions on `grid`.
    pub fn reference(&self, basis_k: usize, grid: &TimeGrid) -> Result<Reference> {
        let basis = BasisSet::fourier(basis_k, grid)?;
        Ok(Reference {
            srvf_warps: self.inverse_warps(grid),
            coefficients: self.coefficients_in(&basis)?,
        })
    }
}

pub struct Generated {
    pub dataset: Dataset,
    pub truth: GroundTruth,
    pub splits: Splits,
}

/// Generates the benchmark. Sample `i` has label `i mod C` and draws its
/// parameters from its own random stream, so output depends only on the seed.
pub fn generate(config: &SynthConfig) -> Result<Generated> {
    config.validate()?;
    let grid = Arc::new(TimeGrid::uniform(config.n_points));
    let t = grid.points();
    let c = config.classes.len();
    let basis = BasisSet::fourier(config.coeff_k, &grid)?;
    let noise =
        Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| CoreError::Config(e.to_string()))?;
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut truth = GroundTruth {
        params: Vec::with_capacity(config.n_samples),
        latent: Vec::with_capacity(config.n_samples),
        warps: Vec::with_capacity(config.n_samples),
        coeff_k: config.coeff_k,
        coefficients: Vec::with_capacity(config.n_samples),
    };
    for i in 0..config.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let label = i % c;
        let spec = &config.classes[label];
        let mut draw = |centre: f64, spread: f64| {
            if spread > 0.0 {
                centre + rng.random_range(-spread..spread)
            } else {
                centre
            }
        };
        let p = SampleParams {
            amplitudes: [
                draw(spec[0].amplitude, spec[0].amplitude_spread),
                draw(spec[1].amplitude, spec[1].amplitude_spread),
            ],
            widths: [
                draw(spec[0].width, spec[0].width_spread),
                draw(spec[1].width, spec[1].width_spread),
            ],
            warp: draw(0.0, config.warp_range),
        };
        let latent_at = |s: f64| {
            gaussian_bump(s, p.amplitudes[0], spec[0].center, p.widths[0])
                + gaussian_bump(s, p.amplitudes[1], spec[1].center, p.widths[1])
        };
        let latent: Vec<f64> = t.iter().map(|&s| latent_at(s)).collect();
        let warp: Vec<f64> = t.iter().map(|&s| exp_warp(s, p.warp)).collect();
        let mut observed: Vec<f64> = warp.iter().map(|&g| latent_at(g)).collect();
        if config.noise_std > 0.0 {
            for v in observed.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        truth.coefficients.push(basis.project(&latent)?);
        truth.latent.push(latent);
        truth.warps.push(warp);
        truth.params.push(p);
        samples.push(FunctionalSample::new(grid.clone(), vec![observed], label)?);
    }
    let [a, b, d] = config.splits;
    let splits = Splits {
        train: (0..a).collect(),
        val: (a..a + b).collect(),
        test: (a + b..a + b + d).collect(),
    };
    Ok(Generated {
        dataset: Dataset::new(samples, c)?,
        truth,
        splits,
    })
}
