//! Empirical probability laws on the real line and flows of marginals.
//!
//! A law is a sorted list of atoms with nonnegative weights summing to one;
//! uniform weights are stored implicitly. Wasserstein distances between 1-D
//! laws use the quantile coupling, which is optimal for costs |x-y|^p.

use crate::error::{CmfError, Result};
use crate::grid::TimeGrid;
use serde::{Deserialize, Serialize};

const WEIGHT_TOL: f64 = 1e-12;

/// Weighted empirical law on the real line with atoms sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLaw {
    samples: Vec<f64>,
    /// None means uniform weights 1/len.
    weights: Option<Vec<f64>>,
}

impl EmpiricalLaw {
    /// Uniform law; samples are sorted internally.
    pub fn from_samples(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CmfError::InvalidInput("empty sample set".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(CmfError::InvalidInput("non-finite sample".into()));
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self {
            samples,
            weights: None,
        })
    }

    /// Weighted law; pairs are sorted by sample value and weights are
    /// renormalized so the stored sum is 1 within 1e-12. Inputs may carry
    /// accumulated rounding but must sum to 1 within 1e-6.
    pub fn from_weighted_samples(samples: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CmfError::InvalidInput("empty sample set".into()));
        }
        if samples.len() != weights.len() {
            return Err(CmfError::InvalidInput(format!(
                "{} samples but {} weights",
                samples.len(),
                weights.len()
            )));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(CmfError::InvalidInput("non-finite sample".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CmfError::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(CmfError::InvalidInput(format!(
                "weights sum to {total}, expected 1 within 1e-6"
            )));
        }
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.sort_by(|&a, &b| samples[a].partial_cmp(&samples[b]).unwrap());
        let samples: Vec<f64> = idx.iter().map(|&j| samples[j]).collect();
        let weights: Vec<f64> = idx.iter().map(|&j| weights[j] / total).collect();
        Ok(Self {
            samples,
            weights: Some(weights),
        })
    }

    /// Point mass at `x`.
    pub fn dirac(x: f64) -> Self {
        Self {
            samples: vec![x],
            weights: None,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    #[inline]
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn weight(&self, j: usize) -> f64 {
        match &self.weights {
            Some(w) => w[j],
            None => 1.0 / self.samples.len() as f64,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }

    /// Weighted mean of `g` over the law.
    pub fn integrate<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        match &self.weights {
            Some(w) => self
                .samples
                .iter()
                .zip(w)
                .map(|(&x, &wx)| wx * g(x))
                .sum(),
            None => {
                let s: f64 = self.samples.iter().map(|&x| g(x)).sum();
                s / self.samples.len() as f64
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.integrate(|x| x)
    }

    /// Left-continuous generalized inverse CDF, clamped to [0, 1].
    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let mut cum = 0.0;
        for j in 0..self.samples.len() {
            cum += self.weight(j);
            if cum >= q - WEIGHT_TOL {
                return self.samples[j];
            }
        }
        *self.samples.last().unwrap()
    }
}

/// Weighted mean of `|y|^4`; finiteness is the membership test for the
/// moment set the fixed-point iteration lives in.
pub fn fourth_moment(law: &EmpiricalLaw) -> f64 {
    law.integrate(|y| {
        let a = y.abs();
        a * a * a * a
    })
}

/// Exact `W_p` between two 1-D empirical laws via the monotone coupling.
///
/// Walks the merged quantile breakpoints of both laws; each segment of
/// shared mass pairs one atom of `a` with one atom of `b`.
pub fn wasserstein_1d(a: &EmpiricalLaw, b: &EmpiricalLaw, p: u32) -> Result<f64> {
    if p != 1 && p != 2 {
        return Err(CmfError::InvalidInput(format!("order p must be 1 or 2, got {p}")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(CmfError::InvalidInput("empty sample set".into()));
    }
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut rem_a = a.weight(0);
    let mut rem_b = b.weight(0);
    let mut cost = 0.0;
    loop {
        let mass = rem_a.min(rem_b);
        let d = (a.samples[ia] - b.samples[ib]).abs();
        cost += mass * if p == 1 { d } else { d * d };
        rem_a -= mass;
        rem_b -= mass;
        if rem_a <= WEIGHT_TOL {
            ia += 1;
            if ia == a.len() {
                break;
            }
            rem_a = a.weight(ia);
        }
        if rem_b <= WEIGHT_TOL {
            ib += 1;
            if ib == b.len() {
                break;
            }
            rem_b = b.weight(ib);
        }
    }
    Ok(if p == 1 { cost } else { cost.sqrt() })
}

/// The flow `t -> mu_t` as one empirical law per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalLawFlow {
    grid: TimeGrid,
    laws: Vec<EmpiricalLaw>,
}

impl MarginalLawFlow {
    pub fn new(grid: TimeGrid, laws: Vec<EmpiricalLaw>) -> Result<Self> {
        if laws.len() != grid.steps() + 1 {
            return Err(CmfError::GridMismatch(format!(
                "flow has {} laws for a grid with {} nodes",
                laws.len(),
                grid.steps() + 1
            )));
        }
        Ok(Self { grid, laws })
    }

    /// Constant-in-time point mass; the default seed of the fixed-point loop.
    pub fn dirac(grid: &TimeGrid, x: f64) -> Self {
        let laws = vec![EmpiricalLaw::dirac(x); grid.steps() + 1];
        Self {
            grid: grid.clone(),
            laws,
        }
    }

    #[inline]
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn law(&self, k: usize) -> &EmpiricalLaw {
        &self.laws[k]
    }

    pub fn laws(&self) -> &[EmpiricalLaw] {
        &self.laws
    }

    /// sup over grid nodes of the fourth marginal moment.
    pub fn fourth_moment_sup(&self) -> f64 {
        self.laws
            .iter()
            .map(fourth_moment)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// sup over grid times of the marginal `W_p`; the convergence monitor of the
/// fixed-point iteration (a lower bound surrogate for path-space `W_p`).
pub fn wasserstein_flow(a: &MarginalLawFlow, b: &MarginalLawFlow, p: u32) -> Result<f64> {
    if !a.grid.same_grid(&b.grid) {
        return Err(CmfError::GridMismatch(
            "flows live on different time grids".into(),
        ));
    }
    let mut sup: f64 = 0.0;
    for (la, lb) in a.laws.iter().zip(&b.laws) {
        sup = sup.max(wasserstein_1d(la, lb, p)?);
    }
    Ok(sup)
}

/// Geodesic interpolation `(1 - lambda) * b + lambda * a` in quantile space.
///
/// For two uniform laws of equal size this is plain interpolation of sorted
/// samples; for weighted laws the atoms live at the merged quantile
/// breakpoints.
pub fn quantile_mix(a: &EmpiricalLaw, b: &EmpiricalLaw, lambda: f64) -> EmpiricalLaw {
    if a.is_uniform() && b.is_uniform() && a.len() == b.len() {
        let samples: Vec<f64> = a
            .samples
            .iter()
            .zip(&b.samples)
            .map(|(&xa, &xb)| lambda * xa + (1.0 - lambda) * xb)
            .collect();
        return EmpiricalLaw {
            samples,
            weights: None,
        };
    }
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut rem_a = a.weight(0);
    let mut rem_b = b.weight(0);
    let mut samples = Vec::new();
    let mut weights = Vec::new();
    loop {
        let mass = rem_a.min(rem_b);
        if mass > 0.0 {
            samples.push(lambda * a.samples[ia] + (1.0 - lambda) * b.samples[ib]);
            weights.push(mass);
        }
        rem_a -= mass;
        rem_b -= mass;
        if rem_a <= WEIGHT_TOL {
            ia += 1;
            if ia == a.len() {
                break;
            }
            rem_a = a.weight(ia);
        }
        if rem_b <= WEIGHT_TOL {
            ib += 1;
            if ib == b.len() {
                break;
            }
            rem_b = b.weight(ib);
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    EmpiricalLaw {
        samples,
        weights: Some(weights),
    }
}

/// Per-marginal quantile mixing of two flows on the same grid.
pub fn mix_flows(a: &MarginalLawFlow, b: &MarginalLawFlow, lambda: f64) -> Result<MarginalLawFlow> {
    if !a.grid.same_grid(&b.grid) {
        return Err(CmfError::GridMismatch(
            "flows live on different time grids".into(),
        ));
    }
    let laws = a
        .laws
        .iter()
        .zip(&b.laws)
        .map(|(la, lb)| quantile_mix(la, lb, lambda))
        .collect();
    Ok(MarginalLawFlow {
        grid: a.grid.clone(),
        laws,
    })
}
