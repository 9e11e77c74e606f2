//! Validation suites: empirical stability of the dynamics in the control,
//! convergence of difference quotients to the variational processes, the
//! first-order duality identity against finite differences, and filtering
//! cross-checks (martingale, unnormalized-consistency, alternative filter,
//! Kalman oracle).

use crate::adjoint::{directional_cost_derivative, solve_variational, CostMeasure};
use crate::error::{CmfError, Result};
use crate::fixed_point::{picard_fixed, picard_iterate, FpSettings};
use crate::grid::TimeGrid;
use crate::kalman::kalman_bucy;
use crate::law::MarginalLawFlow;
use crate::model::CoefficientSet;
use crate::policy::{perturb, ControlPolicy};
use crate::rng::RngStream;
use crate::sim::{fkk_propagate, martingale_check, simulate, zakai_consistency, SimOptions};

fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Number of map updates a converged run applied; replaying this count with
/// the same stream reproduces the returned flow as a fixed composition.
fn converged_updates(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    fp: &FpSettings,
) -> Result<usize> {
    let report = picard_iterate(
        c,
        policy,
        MarginalLawFlow::dirac(grid, c.x0),
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
    Ok(report.iterations - 1)
}

#[allow(clippy::too_many_arguments)]
fn fixed_procedure_run(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    damping: f64,
    updates: usize,
) -> Result<(MarginalLawFlow, crate::sim::ScenarioEnsemble)> {
    let flow = picard_fixed(
        c,
        policy,
        MarginalLawFlow::dirac(grid, c.x0),
        grid,
        scenarios,
        particles,
        stream,
        damping,
        updates,
    )?;
    let ensemble = simulate(
        c,
        policy,
        &flow,
        grid,
        scenarios,
        particles,
        stream,
        &SimOptions {
            store_paths: true,
            resample: false,
        },
    )?;
    Ok((flow, ensemble))
}

// ---------------------------------------------------------------------------
// stability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// (log ||u - v||^2, log E sup |X^u - X^v|^2) per usable pair.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
}

/// Simulates the dynamics at perturbed policies under common random numbers
/// and regresses the pathwise square distance on the control distance.
#[allow(clippy::too_many_arguments)]
pub fn stability_suite(
    c: &CoefficientSet,
    base: &ControlPolicy,
    toward: &ControlPolicy,
    deltas: &[f64],
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    fp: &FpSettings,
) -> Result<StabilityReport> {
    let updates = converged_updates(c, base, grid, scenarios, particles, stream, fp)?;
    let (_, ens_base) =
        fixed_procedure_run(c, base, grid, scenarios, particles, stream, fp.damping, updates)?;
    let base_paths = ens_base.paths()?;
    let dt = grid.dt();
    let n = grid.steps();

    let mut points = Vec::new();
    for &delta in deltas {
        let policy = perturb(base, toward, delta)?;
        let (_, ens) = fixed_procedure_run(
            c, &policy, grid, scenarios, particles, stream, fp.damping, updates,
        )?;
        let paths = ens.paths()?;
        let mut dist = 0.0;
        for row in 0..ens.n_paths() {
            let mut sup: f64 = 0.0;
            for k in 0..=n {
                sup = sup.max((paths.x[(row, k)] - base_paths.x[(row, k)]).abs());
            }
            dist += sup * sup;
        }
        dist /= ens.n_paths() as f64;
        let mut norm2 = 0.0;
        for m in 0..scenarios {
            for k in 0..n {
                let du = ens.controls[(m, k)] - ens_base.controls[(m, k)];
                norm2 += du * du * dt;
            }
        }
        norm2 /= scenarios as f64;
        // zero-distance pairs carry no information for the log regression
        if norm2 > 0.0 && dist > 0.0 {
            points.push((norm2.ln(), dist.ln()));
        }
    }
    if points.len() < 2 {
        return Err(CmfError::InvalidInput(
            "stability regression needs at least two nonzero pairs".into(),
        ));
    }
    let (slope, intercept) = ols(&points);
    Ok(StabilityReport {
        points,
        slope,
        intercept,
    })
}

// ---------------------------------------------------------------------------
// variational convergence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VariationalReport {
    /// (theta, mean sup_t |(X^theta - X)/theta - K|).
    pub e_table: Vec<(f64, f64)>,
    /// (theta, mean over scenarios of sup_t |dU/theta - Vbar|).
    pub du_table: Vec<(f64, f64)>,
}

/// Difference-quotient convergence toward (K, R) and toward the filtered
/// derivative Vbar, under common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn variational_suite(
    c: &CoefficientSet,
    base: &ControlPolicy,
    toward: &ControlPolicy,
    thetas: &[f64],
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    fp: &FpSettings,
) -> Result<VariationalReport> {
    let updates = converged_updates(c, base, grid, scenarios, particles, stream, fp)?;
    let (_, ens_base) =
        fixed_procedure_run(c, base, grid, scenarios, particles, stream, fp.damping, updates)?;
    let pair = solve_variational(c, base, toward, &ens_base)?;
    let base_paths = ens_base.paths()?;
    let n = grid.steps();
    let n_part = particles;

    // filtered derivative from (K, R): per-scenario conditional averages
    let mut vbar = ndarray::Array2::zeros((scenarios, n + 1));
    for m in 0..scenarios {
        for k in 0..=n {
            let mut s_l = 0.0;
            let mut s_r = 0.0;
            let mut s_rx_lk = 0.0;
            for i in 0..n_part {
                let row = m * n_part + i;
                let l = base_paths.logl[(row, k)].exp();
                s_l += l;
                s_r += pair.r[(row, k)];
                s_rx_lk += pair.r[(row, k)] * base_paths.x[(row, k)] + l * pair.k[(row, k)];
            }
            vbar[(m, k)] = s_rx_lk / s_l - (s_r / s_l) * ens_base.u[(m, k)];
        }
    }

    let mut e_table = Vec::new();
    let mut du_table = Vec::new();
    for &theta in thetas {
        let policy = perturb(base, toward, theta)?;
        let (_, ens) = fixed_procedure_run(
            c, &policy, grid, scenarios, particles, stream, fp.damping, updates,
        )?;
        let paths = ens.paths()?;
        let mut e_acc = 0.0;
        for row in 0..ens.n_paths() {
            let mut sup: f64 = 0.0;
            for k in 0..=n {
                let dq = (paths.x[(row, k)] - base_paths.x[(row, k)]) / theta;
                sup = sup.max((dq - pair.k[(row, k)]).abs());
            }
            e_acc += sup;
        }
        e_table.push((theta, e_acc / ens.n_paths() as f64));

        let mut du_acc = 0.0;
        for m in 0..scenarios {
            let mut sup: f64 = 0.0;
            for k in 0..=n {
                let dq = (ens.u[(m, k)] - ens_base.u[(m, k)]) / theta;
                sup = sup.max((dq - vbar[(m, k)]).abs());
            }
            du_acc += sup;
        }
        du_table.push((theta, du_acc / scenarios as f64));
    }
    Ok(VariationalReport { e_table, du_table })
}

// ---------------------------------------------------------------------------
// duality
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DualityReport {
    /// Terminal-cost pairing with (K, R): the E[xi K_T] + E[Theta R_T] part
    /// of the first-order expansion.
    pub pairing: f64,
    /// Running-cost terms of the first-order expansion.
    pub f_terms: f64,
    /// pairing + f_terms: the directional derivative predicted by the
    /// variational calculus.
    pub lhs: f64,
    /// Richardson-extrapolated finite-difference directional derivative.
    pub fd: f64,
    /// |lhs - fd| / (|fd| + 1e-8).
    pub defect: f64,
    pub j_base: f64,
    /// (theta, J at the perturbed policy) for every requested theta.
    pub j_at: Vec<(f64, f64)>,
}

/// First-order duality check: the terminal pairing plus running-cost terms
/// against the finite-difference directional derivative of the cost, all
/// under common random numbers with a fixed inner-iteration count.
#[allow(clippy::too_many_arguments)]
pub fn duality_suite(
    c: &CoefficientSet,
    base: &ControlPolicy,
    toward: &ControlPolicy,
    thetas: &[f64],
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    fp: &FpSettings,
    measure: CostMeasure,
) -> Result<DualityReport> {
    if thetas.len() < 2 {
        return Err(CmfError::InvalidInput(
            "duality extrapolation needs at least two step sizes".into(),
        ));
    }
    let mut sorted = thetas.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());

    if measure != CostMeasure::Q0 {
        return Err(CmfError::InvalidInput(
            "the duality check is defined for the q0 cost measure".into(),
        ));
    }
    let updates = converged_updates(c, base, grid, scenarios, particles, stream, fp)?;
    let (flow_b, ens_b) =
        fixed_procedure_run(c, base, grid, scenarios, particles, stream, fp.damping, updates)?;
    let (j_base, _) = crate::adjoint::cost(c, &flow_b, &ens_b, measure)?;

    let pair = solve_variational(c, base, toward, &ens_b)?;
    let (pairing, f_terms) = directional_cost_derivative(c, base, toward, &ens_b, &pair)?;
    let lhs = pairing + f_terms;

    let mut j_at = Vec::new();
    for &th in &sorted {
        let policy = perturb(base, toward, th)?;
        let (flow_h, ens_h) = fixed_procedure_run(
            c, &policy, grid, scenarios, particles, stream, fp.damping, updates,
        )?;
        let (j_h, _) = crate::adjoint::cost(c, &flow_h, &ens_h, measure)?;
        j_at.push((th, j_h));
    }
    // Richardson extrapolation of d(theta) = (J(theta) - J) / theta to 0:
    // quadratic through the three smallest steps when available, else linear.
    let quotients: Vec<(f64, f64)> = j_at
        .iter()
        .map(|&(t, j)| (t, (j - j_base) / t))
        .collect();
    let m = quotients.len();
    let fd = if m >= 3 {
        let (t1, d1) = quotients[m - 3];
        let (t2, d2) = quotients[m - 2];
        let (t3, d3) = quotients[m - 1];
        // Lagrange value at theta = 0
        d1 * (t2 * t3) / ((t1 - t2) * (t1 - t3))
            + d2 * (t1 * t3) / ((t2 - t1) * (t2 - t3))
            + d3 * (t1 * t2) / ((t3 - t1) * (t3 - t2))
    } else {
        let (t1, d1) = quotients[m - 2];
        let (t2, d2) = quotients[m - 1];
        d2 + (d2 - d1) * t2 / (t1 - t2)
    };
    let defect = (lhs - fd).abs() / (fd.abs() + 1e-8);
    Ok(DualityReport {
        pairing,
        f_terms,
        lhs,
        fd,
        defect,
        j_base,
        j_at,
    })
}

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FilterReport {
    pub martingale_deviation: f64,
    pub martingale_se: f64,
    /// Mean over scenarios of the per-scenario max consistency defect.
    pub zakai_mean_defect: f64,
    pub zakai_max_defect: f64,
    /// sup over scenarios and nodes of |U_fkk - U|.
    pub fkk_sup_distance: f64,
    /// Worst per-scenario time-averaged |U - Kalman mean|, for the
    /// linear-Gaussian model.
    pub kalman_time_avg_error: Option<f64>,
}

/// Filtering cross-checks on one simulated ensemble at the law fixed point.
#[allow(clippy::too_many_arguments)]
pub fn filter_suite(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    fp: &FpSettings,
    kalman_params: Option<(f64, f64)>,
) -> Result<FilterReport> {
    let report = picard_iterate(
        c,
        policy,
        MarginalLawFlow::dirac(grid, c.x0),
        grid,
        scenarios,
        particles,
        stream,
        fp.damping,
        fp.tol,
        fp.max_iter,
    )?;
    let ensemble = simulate(
        c,
        policy,
        &report.flow,
        grid,
        scenarios,
        particles,
        stream,
        &SimOptions::default(),
    )?;

    let (martingale_deviation, martingale_se) = martingale_check(&ensemble);
    let defects = zakai_consistency(&ensemble, c);
    let zakai_mean_defect = defects.iter().sum::<f64>() / defects.len() as f64;
    let zakai_max_defect = defects.iter().fold(0.0f64, |a, &b| a.max(b));

    let fkk = fkk_propagate(&ensemble, c);
    let mut fkk_sup: f64 = 0.0;
    for m in 0..scenarios {
        for k in 0..=grid.steps() {
            fkk_sup = fkk_sup.max((fkk[(m, k)] - ensemble.u[(m, k)]).abs());
        }
    }

    let kalman_time_avg_error = kalman_params.map(|(c_obs, sigma0)| {
        let mut worst: f64 = 0.0;
        for m in 0..scenarios {
            let y: Vec<f64> = ensemble.y.row(m).to_vec();
            let (mean, _) = kalman_bucy(grid, &y, c_obs, sigma0, c.x0);
            let avg: f64 = (0..=grid.steps())
                .map(|k| (ensemble.u[(m, k)] - mean[k]).abs())
                .sum::<f64>()
                / (grid.steps() + 1) as f64;
            worst = worst.max(avg);
        }
        worst
    });

    Ok(FilterReport {
        martingale_deviation,
        martingale_se,
        zakai_mean_defect,
        zakai_max_defect,
        fkk_sup_distance: fkk_sup,
        kalman_time_avg_error,
    })
}
