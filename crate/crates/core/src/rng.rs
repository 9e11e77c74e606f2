//! Counter-based Gaussian streams for the reference-measure Brownian drivers.
//!
//! Every draw is a pure function of `(seed, scenario, particle, step, channel)`,
//! so output is independent of query order and of how work is partitioned
//! across threads. The observation channel ignores the particle index: all
//! particles of a scenario share one observation path.

use crate::grid::TimeGrid;

/// Noise channel tag entering the stream coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// Driver of the state equation (`B^1`), indexed by (scenario, particle).
    State,
    /// Driver of the observation (`Y`), indexed by scenario only.
    Observation,
    /// Auxiliary draws (probe points, resampling offsets).
    Probe,
}

impl Channel {
    #[inline]
    fn tag(self) -> u64 {
        match self {
            Channel::State => 1,
            Channel::Observation => 2,
            Channel::Probe => 3,
        }
    }
}

/// Deterministic stream keyed by a 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn mix(seed: u64, m: u64, i: u64, k: u64, tag: u64) -> u64 {
    let mut h = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    h = splitmix64(h ^ m);
    h = splitmix64(h ^ i);
    h = splitmix64(h ^ k);
    splitmix64(h ^ tag)
}

/// 53-bit mantissa to (0, 1]: never returns 0, safe under `ln`.
#[inline]
fn to_unit_pos(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// 53-bit mantissa to [0, 1).
#[inline]
fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent stream, e.g. for replications.
    pub fn substream(&self, label: u64) -> Self {
        Self {
            seed: mix(self.seed, label, 0x5353, 0, 0x11),
        }
    }

    /// Standard normal draw at the given coordinates (Box-Muller).
    #[inline]
    pub fn normal(&self, scenario: usize, particle: usize, step: usize, channel: Channel) -> f64 {
        let (m, i) = match channel {
            Channel::Observation => (scenario as u64, 0),
            _ => (scenario as u64, particle as u64),
        };
        let h = mix(self.seed, m, i, step as u64, channel.tag());
        let u1 = to_unit_pos(splitmix64(h ^ 0x9E3B));
        let u2 = to_unit(splitmix64(h ^ 0xC2B2));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform draw in [0, 1) at the given coordinates.
    #[inline]
    pub fn uniform(&self, scenario: usize, particle: usize, step: usize, channel: Channel) -> f64 {
        let h = mix(
            self.seed,
            scenario as u64,
            particle as u64,
            step as u64,
            channel.tag() ^ 0x75,
        );
        to_unit(h)
    }
}

/// Brownian increments of the pair `(B^1, Y)` for one (scenario, particle).
///
/// Returns `n` increments per channel, each `N(0, dt)`. The `Y` increments
/// depend on the scenario only.
pub fn brownian_increments(
    stream: &RngStream,
    grid: &TimeGrid,
    scenario: usize,
    particle: usize,
) -> (Vec<f64>, Vec<f64>) {
    let sd = grid.dt().sqrt();
    let n = grid.steps();
    let b1 = (0..n)
        .map(|k| sd * stream.normal(scenario, particle, k, Channel::State))
        .collect();
    let y = (0..n)
        .map(|k| sd * stream.normal(scenario, particle, k, Channel::Observation))
        .collect();
    (b1, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_pure_functions_of_coordinates() {
        let s = RngStream::new(7);
        let g = TimeGrid::new(1.0, 64).unwrap();
        let (b1a, ya) = brownian_increments(&s, &g, 3, 5);
        let (b1b, yb) = brownian_increments(&s, &g, 3, 5);
        assert_eq!(b1a, b1b);
        assert_eq!(ya, yb);
    }

    #[test]
    fn observation_channel_is_shared_across_particles() {
        let s = RngStream::new(11);
        let g = TimeGrid::new(1.0, 16).unwrap();
        let (_, y0) = brownian_increments(&s, &g, 2, 0);
        let (_, y9) = brownian_increments(&s, &g, 2, 9);
        assert_eq!(y0, y9);
        let (b0, _) = brownian_increments(&s, &g, 2, 0);
        let (b9, _) = brownian_increments(&s, &g, 2, 9);
        assert_ne!(b0, b9);
    }

    #[test]
    fn query_order_does_not_matter() {
        let s = RngStream::new(123);
        let forward: Vec<f64> = (0..100)
            .map(|k| s.normal(1, 2, k, Channel::State))
            .collect();
        let mut backward: Vec<f64> = (0..100)
            .rev()
            .map(|k| s.normal(1, 2, k, Channel::State))
            .collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    // CLT bound: the mean of M increments N(0, dt) deviates from 0 by more
    // than 4*sqrt(dt/M) with probability ~6e-5.
    #[test]
    fn increment_mean_matches_clt_bound() {
        let s = RngStream::new(2024);
        let g = TimeGrid::new(1.0, 100).unwrap();
        let dt = g.dt();
        let m_draws = 1_000_000usize;
        let mut sum = 0.0;
        for j in 0..m_draws {
            sum += s.normal(j % 512, j / 512, j % 100, Channel::State) * dt.sqrt();
        }
        let mean = sum / m_draws as f64;
        let bound = 4.0 * (dt / m_draws as f64).sqrt();
        assert!(
            mean.abs() <= bound,
            "sample mean {mean:.3e} outside CLT bound {bound:.3e}"
        );
    }

    // Chi-square concentration: relative sd of the variance estimator over
    // 1e6 draws is sqrt(2/(M-1)) ~ 0.14%, so 1% is a ~7 sigma band.
    #[test]
    fn increment_variance_within_one_percent() {
        let s = RngStream::new(77);
        let g = TimeGrid::new(2.0, 50).unwrap();
        let dt = g.dt();
        let m_draws = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for j in 0..m_draws {
            let z = s.normal(j % 1024, j / 1024, j % 50, Channel::State) * dt.sqrt();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / m_draws as f64;
        let var = sumsq / m_draws as f64 - mean * mean;
        assert!(
            (var - dt).abs() <= 0.01 * dt,
            "sample variance {var:.6e} vs dt {dt:.6e}"
        );
    }
}
