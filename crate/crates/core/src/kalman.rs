//! Kalman-Bucy filter for the linear-Gaussian model: the closed-form oracle
//! the particle filter is validated against.
//!
//! For `dX = sigma0 dB1`, `dY = c X dt + dB2`, known `X_0 = x0`, the
//! conditional mean and variance solve
//! `dm = P c (dY - c m dt)`, `dP/dt = sigma0^2 - c^2 P^2`, `m_0 = x0, P_0 = 0`.

use crate::grid::TimeGrid;

/// Euler discretization of the mean/Riccati pair along one observation path.
///
/// Returns (mean path, variance path), both with `n + 1` nodes.
pub fn kalman_bucy(grid: &TimeGrid, y: &[f64], c: f64, sigma0: f64, x0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = grid.steps();
    assert_eq!(y.len(), n + 1, "observation path must live on the grid");
    let dt = grid.dt();
    let mut mean = Vec::with_capacity(n + 1);
    let mut var = Vec::with_capacity(n + 1);
    mean.push(x0);
    var.push(0.0);
    for k in 0..n {
        let m = mean[k];
        let p = var[k];
        let dy = y[k + 1] - y[k];
        mean.push(m + p * c * (dy - c * m * dt));
        var.push(p + (sigma0 * sigma0 - c * c * p * p) * dt);
    }
    (mean, var)
}
