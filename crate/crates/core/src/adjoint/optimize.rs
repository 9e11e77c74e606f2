//! Projected-gradient policy optimization driven by the maximum-principle
//! gradient, with Armijo backtracking on common-random-numbers cost
//! estimates.

use super::bsde::{solve_adjoint, BasisSpec};
use super::cost::{cost_checked, CostMeasure};
use super::gradient::smp_gradient;
use crate::error::{CmfError, Result};
use crate::fixed_point::{picard_iterate, FixedPointReport, FpSettings};
use crate::grid::TimeGrid;
use crate::law::MarginalLawFlow;
use crate::model::CoefficientSet;
use crate::policy::{ControlPolicy, PolicyKind};
use crate::rng::RngStream;
use crate::sim::{simulate, ScenarioEnsemble, SimOptions};

#[derive(Debug, Clone)]
pub struct OptimizerParams {
    /// Initial gradient step.
    pub step: f64,
    /// Stop once the projected-gradient norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub basis: BasisSpec,
    pub armijo_c: f64,
    pub max_halvings: usize,
    pub fp: FpSettings,
    pub measure: CostMeasure,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            step: 0.5,
            tol: 1e-2,
            max_iter: 25,
            basis: BasisSpec::default_basis(),
            armijo_c: 1e-4,
            max_halvings: 20,
            fp: FpSettings::default(),
            measure: CostMeasure::Q0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub j: f64,
    pub j_stderr: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub duality_defect: Option<f64>,
    pub fixpoint_residual: f64,
    pub step_failed: bool,
}

#[derive(Debug)]
pub struct OptimizeOutcome {
    pub trace: Vec<TraceRow>,
    pub policy: ControlPolicy,
    pub converged: bool,
}

/// Fixed point, full-path ensemble, and cost of one policy.
pub struct PolicyEval {
    pub report: FixedPointReport,
    pub ensemble: ScenarioEnsemble,
    pub j: f64,
    pub se: f64,
}

/// Solve the inner fixed point (warm-started), simulate at it with stored
/// paths, and evaluate the cost. Fails with a stale-law error when the
/// inner iteration does not converge.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    fp: &FpSettings,
    init: MarginalLawFlow,
    measure: CostMeasure,
) -> Result<PolicyEval> {
    let report = picard_iterate(
        c,
        policy,
        init,
        grid,
        scenarios,
        particles,
        stream,
        fp.damping,
        fp.tol,
        fp.max_iter,
    )?;
    if !report.converged {
        return Err(CmfError::StaleLaw {
            residual: report.residual,
            tol: report.tol,
        });
    }
    let ensemble = simulate(
        c,
        policy,
        &report.flow,
        grid,
        scenarios,
        particles,
        stream,
        &SimOptions {
            store_paths: true,
            resample: false,
        },
    )?;
    let (j, se) = cost_checked(c, &report, &ensemble, measure)?;
    Ok(PolicyEval {
        report,
        ensemble,
        j,
        se,
    })
}

/// Projected-gradient descent loop: fixed point, adjoint solve, SMP
/// gradient, Armijo step. Returns the iterate trace; common random numbers
/// are used for every cost comparison.
pub fn optimize(
    c: &CoefficientSet,
    policy0: &ControlPolicy,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    params: &OptimizerParams,
) -> Result<OptimizeOutcome> {
    let (mut theta, ewa_rate) = match &policy0.kind {
        PolicyKind::Linear { theta, ewa_rate } => (theta.clone(), *ewa_rate),
        PolicyKind::Blend { .. } => {
            return Err(CmfError::InvalidInput(
                "the optimizer iterates on linear policies".into(),
            ))
        }
    };
    let bounds = policy0.bounds();
    let make_policy = |theta: &[f64]| {
        ControlPolicy::linear(theta.to_vec(), ewa_rate, bounds).expect("dimension preserved")
    };

    let mut policy = make_policy(&theta);
    let mut flow_init = MarginalLawFlow::dirac(grid, c.x0);
    let mut eval = evaluate_policy(
        c, &policy, grid, scenarios, particles, stream, &params.fp, flow_init.clone(), params.measure,
    )?;
    flow_init = eval.report.flow.clone();

    let mut trace = Vec::new();
    let mut base_step = params.step;
    let mut last_step = params.step;
    let mut converged = false;

    for iteration in 0..params.max_iter {
        let adjoint = solve_adjoint(c, &eval.ensemble, &params.basis)?;
        let grad = smp_gradient(c, &eval.ensemble, &adjoint, &policy, None)?;
        let g = grad.g_smp;
        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();

        trace.push(TraceRow {
            iteration,
            j: eval.j,
            j_stderr: eval.se,
            grad_norm,
            step: last_step,
            duality_defect: None,
            fixpoint_residual: eval.report.residual,
            step_failed: false,
        });

        if grad_norm <= params.tol {
            converged = true;
            break;
        }

        // Armijo backtracking with warm-started inner fixed points
        let mut step = base_step;
        let mut accepted = None;
        for _ in 0..=params.max_halvings {
            let trial_theta: Vec<f64> =
                theta.iter().zip(&g).map(|(t, gj)| t - step * gj).collect();
            let trial_policy = make_policy(&trial_theta);
            let trial = evaluate_policy(
                c,
                &trial_policy,
                grid,
                scenarios,
                particles,
                stream,
                &params.fp,
                flow_init.clone(),
                params.measure,
            )?;
            if trial.j <= eval.j - params.armijo_c * step * grad_norm * grad_norm {
                accepted = Some((trial_theta, trial_policy, trial, step));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((new_theta, new_policy, new_eval, used_step)) => {
                theta = new_theta;
                policy = new_policy;
                flow_init = new_eval.report.flow.clone();
                eval = new_eval;
                last_step = used_step;
            }
            None => {
                trace.push(TraceRow {
                    iteration,
                    j: eval.j,
                    j_stderr: eval.se,
                    grad_norm,
                    step,
                    duality_defect: None,
                    fixpoint_residual: eval.report.residual,
                    step_failed: true,
                });
                base_step *= 0.5;
            }
        }
    }

    Ok(OptimizeOutcome {
        trace,
        policy,
        converged,
    })
}
