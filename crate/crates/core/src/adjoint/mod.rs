//! Cost evaluation, variational processes, the adjoint mean-field BSDE via
//! least-squares Monte Carlo, and the maximum-principle gradient loop.

mod bsde;
mod cost;
mod gradient;
mod optimize;
mod variational;

pub use bsde::{
    solve_adjoint, terminal_conditions, AdjointDiagnostics, AdjointSolution, BasisFeature,
    BasisSpec, ProcessKind,
};
pub use cost::{cost, cost_checked, CostMeasure};
pub use gradient::{smp_gradient, smp_scan_residual, GradientReport};
pub use optimize::{evaluate_policy, optimize, OptimizeOutcome, OptimizerParams, PolicyEval, TraceRow};
pub use variational::{directional_cost_derivative, solve_variational, VariationalPair};

use crate::sim::ScenarioEnsemble;
use ndarray::Array2;

/// Likelihood values exp(log L) of every path at one node.
pub(crate) fn likelihood_column(logl: &Array2<f64>, k: usize) -> Vec<f64> {
    logl.column(k).iter().map(|v| v.exp()).collect()
}

/// Per-scenario sums of one per-path vector.
pub(crate) fn scenario_sums(vals: &[f64], ensemble: &ScenarioEnsemble) -> Vec<f64> {
    let mut out = vec![0.0; ensemble.scenarios];
    for m in 0..ensemble.scenarios {
        let base = m * ensemble.particles;
        let mut acc = 0.0;
        for i in 0..ensemble.particles {
            acc += vals[base + i];
        }
        out[m] = acc;
    }
    out
}
