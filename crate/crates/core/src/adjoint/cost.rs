//! Cost functional over the scenario ensemble.
//!
//! `J = E[ Phi_bar(X_T) + sum_k f_bar(t_k, a_k, u_k) dt ]` with the
//! mean-field arguments integrated against the law-flow samples. The outer
//! expectation is under the reference measure by default; the `pu` variant
//! weights paths by the terminal likelihood.

use crate::error::{CmfError, Result};
use crate::fixed_point::FixedPointReport;
use crate::law::MarginalLawFlow;
use crate::model::CoefficientSet;
use crate::sim::ScenarioEnsemble;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMeasure {
    /// Plain average over paths (the cost as written on the reference space).
    Q0,
    /// Terminal-likelihood-weighted average.
    Pu,
}

/// Cost and its Monte Carlo standard error (over scenarios) at a law flow.
pub fn cost(
    c: &CoefficientSet,
    flow: &MarginalLawFlow,
    ensemble: &ScenarioEnsemble,
    measure: CostMeasure,
) -> Result<(f64, f64)> {
    if !flow.grid().same_grid(&ensemble.grid) {
        return Err(CmfError::GridMismatch(
            "law flow and ensemble live on different grids".into(),
        ));
    }
    let paths = ensemble.paths()?;
    let n = ensemble.grid.steps();
    let dt = ensemble.grid.dt();
    let terminal_law = flow.law(n);
    let a_f = paths.a_f();

    let mut scenario_means = Vec::with_capacity(ensemble.scenarios);
    let mut grand = 0.0;
    for m in 0..ensemble.scenarios {
        let mut acc_m = 0.0;
        for i in 0..ensemble.particles {
            let row = ensemble.path_index(m, i);
            let mut running = 0.0;
            for k in 0..n {
                running += c.f_bar(
                    ensemble.grid.time(k),
                    a_f[(row, k)],
                    flow.law(k),
                    ensemble.controls[(m, k)],
                ) * dt;
            }
            let val = c.phi_bar(paths.x[(row, n)], terminal_law) + running;
            let weighted = match measure {
                CostMeasure::Q0 => val,
                CostMeasure::Pu => paths.logl[(row, n)].exp() * val,
            };
            acc_m += weighted;
        }
        let mean_m = acc_m / ensemble.particles as f64;
        scenario_means.push(mean_m);
        grand += acc_m;
    }
    let j = grand / (ensemble.scenarios * ensemble.particles) as f64;
    let m = ensemble.scenarios as f64;
    let mean_of_means = scenario_means.iter().sum::<f64>() / m;
    let var = scenario_means
        .iter()
        .map(|v| (v - mean_of_means) * (v - mean_of_means))
        .sum::<f64>()
        / (m - 1.0);
    Ok((j, (var / m).sqrt()))
}

/// As [`cost`], but refuses a flow that is not a fixed point within its
/// tolerance.
pub fn cost_checked(
    c: &CoefficientSet,
    report: &FixedPointReport,
    ensemble: &ScenarioEnsemble,
    measure: CostMeasure,
) -> Result<(f64, f64)> {
    if !report.converged {
        return Err(CmfError::StaleLaw {
            residual: report.residual,
            tol: report.tol,
        });
    }
    cost(c, &report.flow, ensemble, measure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::law::MarginalLawFlow;
    use crate::model::{builtin_model, BuiltinModel, ModelParams};
    use crate::policy::ControlPolicy;
    use crate::rng::RngStream;
    use crate::sim::{simulate, SimOptions};
    use std::sync::Arc;

    fn run(c: &CoefficientSet, grid: &TimeGrid) -> (MarginalLawFlow, ScenarioEnsemble) {
        let policy = ControlPolicy::constant(0.2, c.control);
        let flow = MarginalLawFlow::dirac(grid, c.x0);
        let ens = simulate(
            c,
            &policy,
            &flow,
            grid,
            4,
            30,
            &RngStream::new(17),
            &SimOptions {
                store_paths: true,
                resample: false,
            },
        )
        .unwrap();
        (flow, ens)
    }

    #[test]
    fn unit_terminal_cost_gives_exactly_one() {
        let mut c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        c.f = Arc::new(|_t, _a, _y, _z| 0.0);
        c.phi = Arc::new(|_x, _y| 1.0);
        c.f_depends_y = false;
        c.phi_depends_y = false;
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let (flow, ens) = run(&c, &grid);
        let (j, _) = cost(&c, &flow, &ens, CostMeasure::Q0).unwrap();
        assert_eq!(j, 1.0);
    }

    #[test]
    fn unit_running_cost_gives_the_horizon() {
        let mut c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        c.f = Arc::new(|_t, _a, _y, _z| 1.0);
        c.phi = Arc::new(|_x, _y| 0.0);
        c.f_depends_y = false;
        c.phi_depends_y = false;
        let grid = TimeGrid::new(0.75, 24).unwrap();
        let (flow, ens) = run(&c, &grid);
        let (j, _) = cost(&c, &flow, &ens, CostMeasure::Q0).unwrap();
        assert!((j - 0.75).abs() < 1e-12, "J = {j}");
    }

    #[test]
    fn degenerate_dynamics_hit_the_terminal_cost_at_the_start_point() {
        // sigma = 0, h = 0, Phi = (x - y)^2 and x0 = 1: all mass at x0.
        let mut c = builtin_model(BuiltinModel::LinearGaussian, &ModelParams::default()).unwrap();
        c.sigma = Arc::new(|_t, _a, _y, _z| 0.0);
        c.h = Arc::new(|_t, _x| 0.0);
        c.dh_dx = Arc::new(|_t, _x| 0.0);
        c.f = Arc::new(|_t, _a, _y, _z| 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let policy = ControlPolicy::constant(0.0, c.control);
        let ens = simulate(
            &c,
            &policy,
            &MarginalLawFlow::dirac(&grid, 1.0),
            &grid,
            3,
            20,
            &RngStream::new(1),
            &SimOptions {
                store_paths: true,
                resample: false,
            },
        )
        .unwrap();
        // the ensemble's own conditional-mean flow is the Dirac at x0
        let flow = crate::fixed_point::flow_from_ensemble(&ens).unwrap();
        let (j, se) = cost(&c, &flow, &ens, CostMeasure::Q0).unwrap();
        assert_eq!(j, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn stale_flow_is_rejected() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let (flow, ens) = run(&c, &grid);
        let report = FixedPointReport {
            iterations: 1,
            distances: vec![0.5],
            residuals: vec![0.5],
            fourth_moments: vec![1.0],
            residual: 0.5,
            flow,
            fourth_moment_sup: 1.0,
            converged: false,
            tol: 1e-2,
            pathspace_w2: None,
        };
        match cost_checked(&c, &report, &ens, CostMeasure::Q0) {
            Err(CmfError::StaleLaw { .. }) => {}
            other => panic!("expected stale-law error, got {other:?}"),
        }
    }
}
