//! Uniform time grid on `[0, T]`; the index set for every path-valued quantity.

use crate::error::{CmfError, Result};
use serde::{Deserialize, Serialize};

/// Uniform discretization of `[0, T]` into `steps` intervals.
///
/// `times` holds the `steps + 1` grid points `t_0 = 0, ..., t_n = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(CmfError::InvalidInput(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps < 2 {
            return Err(CmfError::InvalidInput(format!(
                "grid needs at least 2 steps, got {steps}"
            )));
        }
        // t_k = T * k / n keeps the endpoint exactly T.
        let times: Vec<f64> = (0..=steps)
            .map(|k| horizon * (k as f64 / steps as f64))
            .collect();
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
            times,
        })
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of increments `n`; the grid has `n + 1` nodes.
    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    #[inline]
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn same_grid(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && self.horizon == other.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_spacing() {
        let g = TimeGrid::new(2.5, 10).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(10), 2.5);
        for k in 0..10 {
            assert!((g.time(k + 1) - g.time(k) - g.dt()).abs() < 1e-12 * g.horizon());
            assert!(g.time(k + 1) > g.time(k));
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }
}
