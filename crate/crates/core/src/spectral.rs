//! Basis construction and least-squares projection of curves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{CoreError, Result};
use crate::fdata::TimeGrid;

/// Gram matrices with a larger condition number are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// A family of basis functions on `[0, 1]`, indexed from 0.
pub trait BasisFamily {
    fn name(&self) -> &'static str;
    fn value(&self, index: usize, t: f64) -> f64;
}

/// `1, √2 sin(2πt), √2 cos(2πt), √2 sin(4πt), ...`
#[derive(Debug, Clone, Copy, Default)]
pub struct Fourier;

impl BasisFamily for Fourier {
    fn name(&self) -> &'static str {
        "fourier"
    }

    fn value(&self, index: usize, t: f64) -> f64 {
        if index == 0 {
            return 1.0;
        }
        let k = index.div_ceil(2) as f64;
        let arg = 2.0 * std::f64::consts::PI * k * t;
        if index % 2 == 1 {
            std::f64::consts::SQRT_2 * arg.sin()
        } else {
            std::f64::consts::SQRT_2 * arg.cos()
        }
    }
}

/// Trapezoidal quadrature weights on a grid.
pub fn trapezoid_weights(t: &[f64]) -> Vec<f64> {
    let m = t.len();
    let mut w = vec![0.0; m];
    for k in 0..m - 1 {
        let h = 0.5 * (t[k + 1] - t[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

/// Basis functions evaluated on a grid, with Gram matrix and projector.
#[derive(Debug, Clone)]
pub struct BasisSet {
    k: usize,
    m: usize,
    /// `m x K`, row-major.
    phi: Vec<f64>,
    weights: Vec<f64>,
    gram: DMatrix<f64>,
    condition: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    /// `G⁻¹ Φᵀ W`, `K x m` row-major; empty when the Gram matrix is singular.
    projector: Vec<f64>,
}

impl BasisSet {
    pub fn new(family: &dyn BasisFamily, k: usize, grid: &TimeGrid) -> Result<Self> {
        let t = grid.points();
        let m = t.len();
        if k == 0 {
            return Err(CoreError::Config("basis size must be at least 1".into()));
        }
        if k > m - 1 {
            return Err(CoreError::Config(format!(
                "basis size {k} exceeds the {} grid intervals",
                m - 1
            )));
        }
        let mut phi = vec![0.0; m * k];
        for (row, &tv) in phi.chunks_mut(k).zip(t) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = family.value(j, tv);
            }
        }
        let weights = trapezoid_weights(t);
        let phi_m = DMatrix::from_row_slice(m, k, &phi);
        let weighted = DMatrix::from_fn(m, k, |r, c| phi_m[(r, c)] * weights[r]);
        let gram = phi_m.transpose() * &weighted;
        let gram = (&gram + gram.transpose()) * 0.5;
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let chol = if condition <= MAX_CONDITION {
            Cholesky::new(gram.clone())
        } else {
            None
        };
        let projector = match &chol {
            Some(c) => {
                let p = c.solve(&weighted.transpose());
                let mut out = vec![0.0; k * m];
                for r in 0..k {
                    for col in 0..m {
                        out[r * m + col] = p[(r, col)];
                    }
                }
                out
            }
            None => Vec::new(),
        };
        Ok(Self {
            k,
            m,
            phi,
            weights,
            gram,
            condition,
            chol,
            projector,
        })
    }

    /// Fourier basis of size `k` on `grid`.
    pub fn fourier(k: usize, grid: &TimeGrid) -> Result<Self> {
        Self::new(&Fourier, k, grid)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid_len(&self) -> usize {
        self.m
    }

    /// Basis values, `m x K` row-major.
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    fn singular(&self) -> CoreError {
        CoreError::Numerical(format!(
            "Gram matrix is numerically singular (condition {:e})",
            self.condition
        ))
    }

    /// The linear map `values -> coefficients`, `K x m` row-major.
    pub fn projector(&self) -> Result<&[f64]> {
        if self.chol.is_none() {
            return Err(self.singular());
        }
        Ok(&self.projector)
    }

    /// Least-squares coefficients: solves `G c = d` with `d_j = ∫ x φ_j`.
    pub fn project(&self, values: &[f64]) -> Result<Vec<f64>> {
        let chol = self.chol.as_ref().ok_or_else(|| self.singular())?;
        if values.len() != self.m {
            return Err(CoreError::Data(format!(
                "{} values for a basis on {} points",
                values.len(),
                self.m
            )));
        }
        let mut d = DVector::zeros(self.k);
        for ((row, &w), &x) in self.phi.chunks(self.k).zip(&self.weights).zip(values) {
            for (j, &p) in row.iter().enumerate() {
                d[j] += w * x * p;
            }
        }
        Ok(chol.solve(&d).iter().copied().collect())
    }

    /// `Φ c` on the grid.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.k {
            return Err(CoreError::Data(format!(
                "{} coefficients for a basis of size {}",
                coeffs.len(),
                self.k
            )));
        }
        Ok(self
            .phi
            .chunks(self.k)
            .map(|row| row.iter().zip(coeffs).map(|(p, c)| p * c).sum())
            .collect())
    }

    /// Projects each channel and concatenates the coefficients.
    pub fn project_channels(&self, channels: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.k * channels.len());
        for ch in channels {
            out.extend(self.project(ch)?);
        }
        Ok(out)
    }
}

/// Fourier basis of size `k` on `grid`.
pub fn fourier_basis(k: usize, grid: &TimeGrid) -> Result<BasisSet> {
    BasisSet::fourier(k, grid)
}
