//! Observation-feedback control policies.
//!
//! A policy reads the observation path up to the current time and nothing
//! else, so its value process is adapted to the observation filtration. The
//! linear form is `u_t = clip(theta . psi(t, Y), u_min, u_max)` with features
//! (constant, Y_t, running integral of Y, exponentially weighted average of
//! Y). Convex variations are represented exactly by value-level blending.

use crate::error::{CmfError, Result};
use crate::grid::TimeGrid;
use crate::model::ControlBounds;
use serde::{Deserialize, Serialize};

pub const FEATURE_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Clipped linear feedback in the observation features.
    Linear { theta: Vec<f64>, ewa_rate: f64 },
    /// Pointwise convex combination `(1 - weight) * base + weight * toward`.
    Blend {
        base: Box<ControlPolicy>,
        toward: Box<ControlPolicy>,
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPolicy {
    pub kind: PolicyKind,
    pub lo: f64,
    pub hi: f64,
}

impl ControlPolicy {
    pub fn linear(theta: Vec<f64>, ewa_rate: f64, bounds: ControlBounds) -> Result<Self> {
        if theta.len() != FEATURE_DIM {
            return Err(CmfError::InvalidInput(format!(
                "policy needs {FEATURE_DIM} parameters, got {}",
                theta.len()
            )));
        }
        if !(ewa_rate > 0.0) {
            return Err(CmfError::InvalidInput(
                "ewa_rate must be positive".into(),
            ));
        }
        Ok(Self {
            kind: PolicyKind::Linear { theta, ewa_rate },
            lo: bounds.lo,
            hi: bounds.hi,
        })
    }

    pub fn constant(value: f64, bounds: ControlBounds) -> Self {
        Self {
            kind: PolicyKind::Linear {
                theta: vec![value, 0.0, 0.0, 0.0],
                ewa_rate: 1.0,
            },
            lo: bounds.lo,
            hi: bounds.hi,
        }
    }

    pub fn bounds(&self) -> ControlBounds {
        ControlBounds {
            lo: self.lo,
            hi: self.hi,
        }
    }

    pub fn theta(&self) -> Option<&[f64]> {
        match &self.kind {
            PolicyKind::Linear { theta, .. } => Some(theta),
            PolicyKind::Blend { .. } => None,
        }
    }

    /// Feature rows psi(t_k, Y) for every node of the grid. Row k depends on
    /// Y only through indices <= k.
    pub fn features(grid: &TimeGrid, y: &[f64], ewa_rate: f64) -> Vec<[f64; FEATURE_DIM]> {
        let n = grid.steps();
        let dt = grid.dt();
        let decay = (-ewa_rate * dt).exp();
        let mut out = Vec::with_capacity(n + 1);
        let mut integral = 0.0;
        let mut ewa = y[0];
        for k in 0..=n {
            if k > 0 {
                integral += y[k - 1] * dt; // left-point rule over [0, t_k)
                ewa = decay * ewa + (1.0 - decay) * y[k];
            }
            out.push([1.0, y[k], integral, ewa]);
        }
        out
    }

    /// Policy values at every node of the grid along one observation path.
    pub fn values(&self, grid: &TimeGrid, y: &[f64]) -> Vec<f64> {
        match &self.kind {
            PolicyKind::Linear { theta, ewa_rate } => {
                Self::features(grid, y, *ewa_rate)
                    .into_iter()
                    .map(|psi| {
                        let raw: f64 = theta.iter().zip(psi).map(|(t, p)| t * p).sum();
                        raw.clamp(self.lo, self.hi)
                    })
                    .collect()
            }
            PolicyKind::Blend {
                base,
                toward,
                weight,
            } => {
                if *weight == 0.0 {
                    return base.values(grid, y);
                }
                if *weight == 1.0 {
                    return toward.values(grid, y);
                }
                let vb = base.values(grid, y);
                let vt = toward.values(grid, y);
                // literal convex variation: exact when toward == base
                vb.into_iter()
                    .zip(vt)
                    .map(|(b, t)| b + weight * (t - b))
                    .collect()
            }
        }
    }

    /// Nodes where the linear policy is strictly inside the control set, so
    /// the clip has unit slope and parameters move the control.
    pub fn active_mask(&self, grid: &TimeGrid, y: &[f64]) -> Result<Vec<bool>> {
        match &self.kind {
            PolicyKind::Linear { theta, ewa_rate } => Ok(Self::features(grid, y, *ewa_rate)
                .into_iter()
                .map(|psi| {
                    let raw: f64 = theta.iter().zip(psi).map(|(t, p)| t * p).sum();
                    raw > self.lo && raw < self.hi
                })
                .collect()),
            PolicyKind::Blend { .. } => Err(CmfError::InvalidInput(
                "active set is defined for linear policies only".into(),
            )),
        }
    }
}

/// Convex variation `u + theta (v - u)`, exact pointwise by value blending;
/// stays in the control set by convexity.
pub fn perturb(u: &ControlPolicy, v: &ControlPolicy, theta: f64) -> Result<ControlPolicy> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(CmfError::InvalidInput(format!(
            "perturbation weight must lie in [0, 1], got {theta}"
        )));
    }
    if u.lo != v.lo || u.hi != v.hi {
        return Err(CmfError::InvalidInput(
            "policies live on different control sets".into(),
        ));
    }
    Ok(ControlPolicy {
        kind: PolicyKind::Blend {
            base: Box::new(u.clone()),
            toward: Box::new(v.clone()),
            weight: theta,
        },
        lo: u.lo,
        hi: u.hi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Channel, RngStream};

    fn bounds() -> ControlBounds {
        ControlBounds { lo: -1.0, hi: 1.0 }
    }

    fn sample_y(n: usize) -> Vec<f64> {
        let s = RngStream::new(42);
        let mut y = vec![0.0];
        for k in 0..n {
            y.push(y[k] + 0.1 * s.normal(0, 0, k, Channel::Observation));
        }
        y
    }

    #[test]
    fn values_are_clipped_and_adapted() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let y = sample_y(50);
        let p = ControlPolicy::linear(vec![0.5, 2.0, 1.0, 1.0], 2.0, bounds()).unwrap();
        let vals = p.values(&grid, &y);
        assert!(vals.iter().all(|v| (-1.0..=1.0).contains(v)));

        // adaptedness: perturbing the future leaves the past unchanged
        let mut y2 = y.clone();
        for v in y2.iter_mut().skip(26) {
            *v += 5.0;
        }
        let vals2 = p.values(&grid, &y2);
        assert_eq!(&vals[..=25], &vals2[..=25]);
        assert_ne!(&vals[26..], &vals2[26..]);
    }

    #[test]
    fn perturb_identities() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let y = sample_y(20);
        let u = ControlPolicy::linear(vec![0.1, 0.3, 0.0, 0.2], 1.0, bounds()).unwrap();
        let v = ControlPolicy::linear(vec![-0.2, 0.1, 0.4, 0.0], 1.0, bounds()).unwrap();

        let same = perturb(&u, &u, 0.37).unwrap();
        assert_eq!(same.values(&grid, &y), u.values(&grid, &y));

        let all_v = perturb(&u, &v, 1.0).unwrap();
        assert_eq!(all_v.values(&grid, &y), v.values(&grid, &y));

        let a = ControlPolicy::constant(0.0, bounds());
        let b = ControlPolicy::constant(2.0, ControlBounds { lo: -1.0, hi: 1.0 });
        // constant 2 clips to 1; midpoint of 0 and 1 is 0.5
        let mid = perturb(&a, &b, 0.5).unwrap();
        assert!(mid.values(&grid, &y).iter().all(|&x| x == 0.5));

        let c = ControlPolicy::constant(0.0, ControlBounds { lo: -2.0, hi: 2.0 });
        let d = ControlPolicy::constant(2.0, ControlBounds { lo: -2.0, hi: 2.0 });
        let mid2 = perturb(&c, &d, 0.5).unwrap();
        assert!(mid2.values(&grid, &y).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn mixed_control_sets_are_rejected() {
        let u = ControlPolicy::constant(0.0, ControlBounds { lo: -1.0, hi: 1.0 });
        let v = ControlPolicy::constant(0.0, ControlBounds { lo: -2.0, hi: 2.0 });
        assert!(perturb(&u, &v, 0.5).is_err());
    }

    #[test]
    fn active_mask_tracks_clipping() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let y = sample_y(10);
        let interior = ControlPolicy::constant(0.3, bounds());
        assert!(interior
            .active_mask(&grid, &y)
            .unwrap()
            .iter()
            .all(|&a| a));
        let saturated = ControlPolicy::constant(5.0, bounds());
        assert!(saturated
            .active_mask(&grid, &y)
            .unwrap()
            .iter()
            .all(|&a| !a));
    }
}
