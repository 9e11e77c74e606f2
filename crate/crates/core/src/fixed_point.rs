//! The solution map on law flows and its damped Picard iteration.
//!
//! One application simulates the system under the input flow, forms the
//! conditional-mean path per scenario, and returns the flow of its marginals
//! under the model measure: each marginal is the likelihood-weighted
//! empirical law of the scenario values, with weights proportional to the
//! unnormalized mass S0 (the Radon-Nikodym density of the model measure on
//! the observation sigma-field). A fixed stream makes the map deterministic,
//! so the whole iteration is reproducible from the seed.

use crate::error::Result;
use crate::grid::TimeGrid;
use crate::law::{mix_flows, wasserstein_flow, EmpiricalLaw, MarginalLawFlow};
use crate::model::CoefficientSet;
use crate::policy::ControlPolicy;
use crate::rng::RngStream;
use crate::sim::{simulate, ScenarioEnsemble, SimOptions};
use ndarray::Array2;

/// One application of the solution map; also returns the scenario ensemble
/// it was computed from (the conditional-mean paths live in `ensemble.u`).
pub fn apply_t(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    flow: &MarginalLawFlow,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
) -> Result<(MarginalLawFlow, ScenarioEnsemble)> {
    let ensemble = simulate(
        c,
        policy,
        flow,
        grid,
        scenarios,
        particles,
        stream,
        &SimOptions::default(),
    )?;
    let out = flow_from_ensemble(&ensemble)?;
    Ok((out, ensemble))
}

/// Law flow of the conditional mean under the model measure: atoms are the
/// per-scenario values, weights proportional to S0 at each node.
pub fn flow_from_ensemble(ensemble: &ScenarioEnsemble) -> Result<MarginalLawFlow> {
    let n = ensemble.grid.steps();
    let m = ensemble.scenarios;
    let mut laws = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let samples: Vec<f64> = (0..m).map(|s| ensemble.u[(s, k)]).collect();
        let raw: Vec<f64> = (0..m).map(|s| ensemble.s0[(s, k)]).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        laws.push(EmpiricalLaw::from_weighted_samples(samples, weights)?);
    }
    MarginalLawFlow::new(ensemble.grid.clone(), laws)
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    /// Number of map applications performed.
    pub iterations: usize,
    /// Per-iteration update distances `W2(mu_k, mu_{k+1})`.
    pub distances: Vec<f64>,
    /// Per-iteration residuals `W2(mu_k, T(mu_k))`.
    pub residuals: Vec<f64>,
    /// Per-iteration fourth-moment sup of the iterate.
    pub fourth_moments: Vec<f64>,
    /// `W2(mu*, T(mu*))` of the returned flow.
    pub residual: f64,
    /// The returned flow `mu*`.
    pub flow: MarginalLawFlow,
    /// sup over nodes of the fourth marginal moment of `mu*`.
    pub fourth_moment_sup: f64,
    pub converged: bool,
    /// Tolerance the run was asked to reach.
    pub tol: f64,
    /// Exact path-space W2 between the last two conditional-mean path
    /// ensembles (uniform path weights), when the scenario count permits.
    pub pathspace_w2: Option<f64>,
}

/// Damped Picard iteration `mu_{k+1} = mix(T(mu_k), mu_k; lambda)`.
///
/// Stops once the residual `W2(mu_k, T(mu_k))` reaches `tol` (for the
/// undamped default the residual and the update distance coincide), or at
/// `max_iter` with `converged = false`; no exception on non-convergence.
#[allow(clippy::too_many_arguments)]
pub fn picard_iterate(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    mu0: MarginalLawFlow,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointReport> {
    assert!(tol > 0.0, "tolerance must be positive");
    assert!(max_iter >= 1, "need at least one iteration");
    assert!(damping > 0.0 && damping <= 1.0, "damping must lie in (0, 1]");

    let mut mu = mu0;
    let mut distances = Vec::new();
    let mut residuals = Vec::new();
    let mut fourth_moments = Vec::new();
    let mut prev_paths: Option<Array2<f64>> = None;
    let mut last_paths: Option<Array2<f64>> = None;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iter {
        let (t_mu, ensemble) = apply_t(c, policy, &mu, grid, scenarios, particles, stream)?;
        iterations += 1;
        residual = wasserstein_flow(&mu, &t_mu, 2)?;
        // quantile mixing scales the update by exactly the damping factor
        distances.push(damping * residual);
        residuals.push(residual);
        fourth_moments.push(mu.fourth_moment_sup());
        prev_paths = last_paths.take();
        last_paths = Some(ensemble.u);
        if residual <= tol {
            converged = true;
            break;
        }
        mu = mix_flows(&t_mu, &mu, damping)?;
    }

    let pathspace_w2 = match (&prev_paths, &last_paths) {
        (Some(a), Some(b)) if scenarios <= crate::assign::ASSIGNMENT_CAP => {
            crate::assign::wasserstein_pathspace(a, b).ok()
        }
        _ => None,
    };

    Ok(FixedPointReport {
        iterations,
        distances,
        residuals,
        fourth_moments,
        residual,
        fourth_moment_sup: mu.fourth_moment_sup(),
        flow: mu,
        converged,
        tol,
        pathspace_w2,
    })
}

/// Exactly `iters` applications of the damped map with no early stop.
///
/// Finite-difference cost evaluations use this so that the policy-to-cost
/// map is one fixed composition under common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn picard_fixed(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    mu0: MarginalLawFlow,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    damping: f64,
    iters: usize,
) -> Result<MarginalLawFlow> {
    let mut mu = mu0;
    for _ in 0..iters {
        let (t_mu, _) = apply_t(c, policy, &mu, grid, scenarios, particles, stream)?;
        mu = mix_flows(&t_mu, &mu, damping)?;
    }
    Ok(mu)
}

/// Fixed-point solver settings shared by the optimizer and the harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpSettings {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FpSettings {
    fn default() -> Self {
        Self {
            damping: 1.0,
            tol: 1e-2,
            max_iter: 20,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, BuiltinModel, ModelParams};
    use crate::policy::ControlPolicy;
    use std::sync::Arc;

    #[test]
    fn no_meanfield_map_is_constant_in_the_law() {
        let c = builtin_model(BuiltinModel::NoMeanfield, &ModelParams::default()).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let policy = ControlPolicy::constant(0.2, c.control);
        let stream = RngStream::new(5);
        let mu_a = MarginalLawFlow::dirac(&grid, 1.0);
        let mu_b = MarginalLawFlow::dirac(&grid, -4.0);
        let (ta, _) = apply_t(&c, &policy, &mu_a, &grid, 8, 50, &stream).unwrap();
        let (tb, _) = apply_t(&c, &policy, &mu_b, &grid, 8, 50, &stream).unwrap();
        for k in 0..=20 {
            assert_eq!(ta.law(k).samples(), tb.law(k).samples());
        }
    }

    #[test]
    fn no_meanfield_converges_in_one_iteration_with_zero_distance() {
        let c = builtin_model(BuiltinModel::NoMeanfield, &ModelParams::default()).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let policy = ControlPolicy::constant(0.2, c.control);
        let stream = RngStream::new(5);
        // start from the map's own output: one more application is a fixed point
        let (mu1, _) =
            apply_t(&c, &policy, &MarginalLawFlow::dirac(&grid, 1.0), &grid, 8, 50, &stream)
                .unwrap();
        let report =
            picard_iterate(&c, &policy, mu1, &grid, 8, 50, &stream, 1.0, 1e-10, 5).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 1);
        assert_eq!(report.distances[0], 0.0);
        assert_eq!(report.residual, 0.0);
    }

    #[test]
    fn degenerate_diffusion_reaches_a_point_mass_in_one_iteration() {
        let mut c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        c.sigma = Arc::new(|_t, _a, _y, _z| 0.0);
        c.dsigma_da = Arc::new(|_t, _a, _y, _z| 0.0);
        c.dsigma_dy = Arc::new(|_t, _a, _y, _z| 0.0);
        c.dsigma_dz = Arc::new(|_t, _a, _y, _z| 0.0);
        c.sigma_depends_y = false;
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let policy = ControlPolicy::constant(0.0, c.control);
        let stream = RngStream::new(9);
        let report = picard_iterate(
            &c,
            &policy,
            MarginalLawFlow::dirac(&grid, 1.0),
            &grid,
            6,
            40,
            &stream,
            1.0,
            1e-9,
            5,
        )
        .unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 1);
        for k in 0..=16 {
            for &v in report.flow.law(k).samples() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iteration_is_reproducible_from_the_seed() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let grid = TimeGrid::new(0.5, 12).unwrap();
        let policy = ControlPolicy::constant(0.1, c.control);
        let run = || {
            picard_iterate(
                &c,
                &policy,
                MarginalLawFlow::dirac(&grid, 1.0),
                &grid,
                8,
                60,
                &RngStream::new(321),
                1.0,
                1e-3,
                10,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.residual, b.residual);
        assert_eq!(a.distances, b.distances);
        assert_eq!(a.iterations, b.iterations);
    }

    // Scenario values of the conditional mean concentrate at rate 1/sqrt(N)
    // when the observation carries no information.
    #[test]
    fn zero_observation_scenario_values_concentrate() {
        let c = builtin_model(BuiltinModel::ZeroObservation, &ModelParams::default()).unwrap();
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let policy = ControlPolicy::constant(0.0, c.control);
        let stream = RngStream::new(31);
        let n_particles = 800;
        let (flow, ensemble) = apply_t(
            &c,
            &policy,
            &MarginalLawFlow::dirac(&grid, 1.0),
            &grid,
            24,
            n_particles,
            &stream,
        )
        .unwrap();
        // path std at T from the pooled particle population
        let paths_std = {
            let k = grid.steps();
            let mut vals = Vec::new();
            for m in 0..ensemble.scenarios {
                vals.push(ensemble.u[(m, k)]);
            }
            // spread of X_T itself, estimated from an independent large-N run
            let big = simulate(
                &c,
                &policy,
                &MarginalLawFlow::dirac(&grid, 1.0),
                &grid,
                2,
                4000,
                &stream.substream(1),
                &SimOptions {
                    store_paths: true,
                    resample: false,
                },
            )
            .unwrap();
            let xs = big.paths().unwrap();
            let col = xs.x.column(k);
            let mean = col.sum() / col.len() as f64;
            (col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / col.len() as f64).sqrt()
        };
        let law = flow.law(grid.steps());
        let mean = law.mean();
        let std = law
            .samples()
            .iter()
            .zip(0..law.len())
            .map(|(&v, j)| law.weight(j) * (v - mean) * (v - mean))
            .sum::<f64>()
            .sqrt();
        assert!(
            std <= 3.0 * paths_std / (n_particles as f64).sqrt(),
            "scenario std {std} vs bound {}",
            3.0 * paths_std / (n_particles as f64).sqrt()
        );
    }

    // T maps into the finite-fourth-moment set: per scenario, the fourth
    // moment of the conditional mean is dominated by the conditional fourth
    // moment of the state (Jensen), checked on the simulated aggregates.
    #[test]
    fn fourth_moment_is_dominated_by_state_moments() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let policy = ControlPolicy::constant(0.1, c.control);
        let stream = RngStream::new(77);
        let ensemble = simulate(
            &c,
            &policy,
            &MarginalLawFlow::dirac(&grid, 1.0),
            &grid,
            10,
            300,
            &stream,
            &SimOptions {
                store_paths: true,
                resample: false,
            },
        )
        .unwrap();
        let paths = ensemble.paths().unwrap();
        for m in 0..ensemble.scenarios {
            for k in 0..=grid.steps() {
                let u4 = ensemble.u[(m, k)].powi(4);
                // likelihood-weighted fourth moment of X within the scenario
                let mut sw = 0.0;
                let mut swx4 = 0.0;
                for i in 0..ensemble.particles {
                    let row = ensemble.path_index(m, i);
                    let w = paths.logl[(row, k)].exp();
                    sw += w;
                    swx4 += w * paths.x[(row, k)].powi(4);
                }
                assert!(
                    u4 <= swx4 / sw + 1e-9,
                    "Jensen violated at m={m}, k={k}: {u4} > {}",
                    swx4 / sw
                );
            }
        }
        let report = picard_iterate(
            &c,
            &policy,
            MarginalLawFlow::dirac(&grid, 1.0),
            &grid,
            10,
            300,
            &stream,
            1.0,
            1e-2,
            8,
        )
        .unwrap();
        assert!(report.fourth_moment_sup.is_finite());
    }
}
