//! Uniform time grid on `[0, T]`.

use crate::error::{Error, Result};

/// Equidistant discretization of `[0, T]` into `n_t` steps of width `dt = T / n_t`.
///
/// Noise vectors carry one value per step (`k = 0..n_t`, left endpoints), state
/// paths one value per grid point (`k = 0..=n_t`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n_t: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(n_t: usize, horizon: f64) -> Result<Self> {
        if n_t < 2 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs n_t >= 2, got {n_t}"
            )));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        Ok(Self { n_t, horizon })
    }

    #[inline]
    pub fn n_t(&self) -> usize {
        self.n_t
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Grid time `t_k = k * dt`, valid for `k = 0..=n_t`.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }
}
