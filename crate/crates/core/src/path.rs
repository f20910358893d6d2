//! Discretized noise vectors and state paths with the dt-weighted inner product.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Discretized control/noise `eta` in `R^{n * n_t}`, entry `(k, i)` holding the
/// i-th component at step k. All inner products are weighted by `dt`, so that
/// `inner_product(u, u)` approximates the squared `L^2([0,T], R^n)` norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

impl NoiseVector {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            data: vec![0.0; dim * grid.n_t()],
        }
    }

    pub fn constant(grid: TimeGrid, dim: usize, value: f64) -> Self {
        Self {
            grid,
            dim,
            data: vec![value; dim * grid.n_t()],
        }
    }

    pub fn from_data(grid: TimeGrid, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * grid.n_t() {
            return Err(Error::DimensionMismatch {
                context: "NoiseVector::from_data",
                expected: dim * grid.n_t(),
                got: data.len(),
            });
        }
        Ok(Self { grid, dim, data })
    }

    #[inline]
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of scalar entries, `n * n_t`.
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Components at step `k` as a slice of length `dim`.
    #[inline]
    pub fn step(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn step_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.grid == other.grid && self.dim == other.dim
    }

    /// dt-weighted inner product; panics are avoided by shape-checking first.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::GridMismatch {
                context: "inner_product",
            });
        }
        Ok(self.dot_unchecked(other))
    }

    #[inline]
    pub(crate) fn dot_unchecked(&self, other: &Self) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum();
        self.grid.dt() * s
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot_unchecked(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }
}

/// dt-weighted inner product of two noise vectors on the same grid.
pub fn inner_product(u: &NoiseVector, v: &NoiseVector) -> Result<f64> {
    u.dot(v)
}

/// Discretized state trajectory in `R^{n * (n_t + 1)}`, one state per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

impl StatePath {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            data: vec![0.0; dim * (grid.n_t() + 1)],
        }
    }

    pub fn from_data(grid: TimeGrid, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * (grid.n_t() + 1) {
            return Err(Error::DimensionMismatch {
                context: "StatePath::from_data",
                expected: dim * (grid.n_t() + 1),
                got: data.len(),
            });
        }
        Ok(Self { grid, dim, data })
    }

    #[inline]
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// State at grid point `k`, valid for `k = 0..=n_t`.
    #[inline]
    pub fn state(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn state_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.grid.n_t())
    }
}
