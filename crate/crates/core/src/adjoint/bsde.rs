//! Adjoint mean-field BSDE solved by backward least-squares Monte Carlo.
//!
//! Backward induction per time step: the martingale integrands are
//! regressions of the next-step values against the increment over dt, the
//! dual-projection increments are regressions of kernel-weighted tail sums,
//! and the conditional-expectation step folds the drift and projected
//! increments back into (p, Q). All conditional expectations share one
//! polynomial feature basis and one Gram factorization per step; regression
//! residuals are surfaced as diagnostics rather than hidden.

use super::{likelihood_column, scenario_sums};
use crate::error::{CmfError, Result};
use crate::model::CoefficientSet;
use crate::sim::ScenarioEnsemble;
use ndarray::Array2;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisFeature {
    One,
    X,
    X2,
    L,
    LX,
    U,
    Y,
    PathFeature,
}

impl BasisFeature {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "1" | "one" => Ok(Self::One),
            "x" => Ok(Self::X),
            "x2" => Ok(Self::X2),
            "l" => Ok(Self::L),
            "lx" => Ok(Self::LX),
            "u" => Ok(Self::U),
            "y" => Ok(Self::Y),
            "a" => Ok(Self::PathFeature),
            other => Err(CmfError::InvalidInput(format!(
                "unknown basis feature '{other}' (expected one of 1, x, x2, l, lx, u, y, a)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::One => "1",
            Self::X => "x",
            Self::X2 => "x2",
            Self::L => "l",
            Self::LX => "lx",
            Self::U => "u",
            Self::Y => "y",
            Self::PathFeature => "a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisSpec(pub Vec<BasisFeature>);

impl BasisSpec {
    pub fn default_basis() -> Self {
        Self(vec![
            BasisFeature::One,
            BasisFeature::X,
            BasisFeature::X2,
            BasisFeature::L,
            BasisFeature::LX,
            BasisFeature::U,
            BasisFeature::Y,
            BasisFeature::PathFeature,
        ])
    }

    pub fn parse(names: &[String]) -> Result<Self> {
        if names.is_empty() {
            return Err(CmfError::InvalidInput("empty basis".into()));
        }
        Ok(Self(
            names
                .iter()
                .map(|n| BasisFeature::parse(n))
                .collect::<Result<Vec<_>>>()?,
        ))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

const RIDGE_BASE: f64 = 1e-8;

/// Cholesky factorization in place; fails on non-positive pivots.
fn cholesky(g: &mut [f64], b: usize) -> bool {
    for i in 0..b {
        for j in 0..=i {
            let mut s = g[i * b + j];
            for k in 0..j {
                s -= g[i * b + k] * g[j * b + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return false;
                }
                g[i * b + j] = s.sqrt();
            } else {
                g[i * b + j] = s / g[j * b + j];
            }
        }
    }
    true
}

fn chol_solve(chol: &[f64], b: usize, rhs: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; b];
    for i in 0..b {
        let mut s = rhs[i];
        for k in 0..i {
            s -= chol[i * b + k] * y[k];
        }
        y[i] = s / chol[i * b + i];
    }
    let mut x = vec![0.0; b];
    for i in (0..b).rev() {
        let mut s = y[i];
        for k in i + 1..b {
            s -= chol[k * b + i] * x[k];
        }
        x[i] = s / chol[i * b + i];
    }
    x
}

/// One factorized least-squares problem per time step, shared by every
/// regression target of that step.
struct StepLs {
    chol: Vec<f64>,
    xt: Array2<f64>, // design, rows = paths
    dim: usize,
    ridge_used: bool,
}

impl StepLs {
    fn new(design: Array2<f64>) -> Result<Self> {
        let (rows, dim) = design.dim();
        let mut gram = vec![0.0; dim * dim];
        for r in 0..rows {
            let row = design.row(r);
            for i in 0..dim {
                let vi = row[i];
                for j in 0..=i {
                    gram[i * dim + j] += vi * row[j];
                }
            }
        }
        for i in 0..dim {
            for j in i + 1..dim {
                gram[i * dim + j] = gram[j * dim + i];
            }
        }
        let trace: f64 = (0..dim).map(|i| gram[i * dim + i]).sum();
        let mut ridge = RIDGE_BASE * (trace / dim as f64).max(1e-300);
        let mut chol = gram.clone();
        let mut ridge_used = false;
        if !cholesky(&mut chol, dim) {
            ridge_used = true;
            loop {
                chol = gram.clone();
                for i in 0..dim {
                    chol[i * dim + i] += ridge;
                }
                if cholesky(&mut chol, dim) {
                    break;
                }
                ridge *= 100.0;
                if ridge > 1e6 * (trace / dim as f64).max(1.0) {
                    return Err(CmfError::InvalidInput(
                        "regression Gram matrix is irreparably singular".into(),
                    ));
                }
            }
        }
        Ok(Self {
            chol,
            xt: design,
            dim,
            ridge_used,
        })
    }

    /// Coefficients and fitted values for one target.
    fn fit(&self, target: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rows = self.xt.nrows();
        let mut rhs = vec![0.0; self.dim];
        for r in 0..rows {
            let row = self.xt.row(r);
            let t = target[r];
            for j in 0..self.dim {
                rhs[j] += row[j] * t;
            }
        }
        let beta = chol_solve(&self.chol, self.dim, &rhs);
        let fitted = (0..rows)
            .map(|r| {
                let row = self.xt.row(r);
                beta.iter().zip(row).map(|(b, v)| b * v).sum()
            })
            .collect();
        (beta, fitted)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdjointDiagnostics {
    /// RMS regression residual of the p-step per time node.
    pub p_residual_rms: Vec<f64>,
    /// Worst normal-equation orthogonality defect across steps.
    pub orthogonality_max: f64,
    /// Number of steps where the Gram matrix needed a ridge.
    pub ridge_fallbacks: usize,
}

/// Regression representation of the six adjoint processes.
#[derive(Debug)]
pub struct AdjointSolution {
    pub basis: BasisSpec,
    /// Coefficients per step (row k valid for k < n).
    pub coef_p: Array2<f64>,
    pub coef_q: Array2<f64>,
    pub coef_q_tilde: Array2<f64>,
    pub coef_big_q: Array2<f64>,
    pub coef_m: Array2<f64>,
    pub coef_m_tilde: Array2<f64>,
    /// Dual-projection increment coefficients per step.
    pub coef_gamma: Array2<f64>,
    /// Terminal condition of p per path (imposed, not regressed).
    pub xi: Vec<f64>,
    /// Terminal condition of Q per path.
    pub theta: Vec<f64>,
    /// Fitted q per path and step, kept because the maximum-principle
    /// integrand consumes it everywhere.
    pub q_values: Array2<f64>,
    pub diagnostics: AdjointDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    P,
    QSmall,
    QTildeSmall,
    BigQ,
    MSmall,
    MTildeSmall,
}

impl AdjointSolution {
    /// Realized per-path values of one process at node k.
    pub fn realize(&self, ensemble: &ScenarioEnsemble, which: ProcessKind, k: usize) -> Result<Vec<f64>> {
        let n = ensemble.grid.steps();
        if k == n {
            return match which {
                ProcessKind::P => Ok(self.xi.clone()),
                ProcessKind::BigQ => Ok(self.theta.clone()),
                _ => Err(CmfError::InvalidInput(
                    "martingale integrands are defined on steps 0..n-1".into(),
                )),
            };
        }
        let coefs = match which {
            ProcessKind::P => &self.coef_p,
            ProcessKind::QSmall => &self.coef_q,
            ProcessKind::QTildeSmall => &self.coef_q_tilde,
            ProcessKind::BigQ => &self.coef_big_q,
            ProcessKind::MSmall => &self.coef_m,
            ProcessKind::MTildeSmall => &self.coef_m_tilde,
        };
        let design = design_matrix(&self.basis, ensemble, k)?;
        let row = coefs.row(k);
        Ok((0..design.nrows())
            .map(|r| design.row(r).iter().zip(&row).map(|(v, b)| v * b).sum())
            .collect())
    }
}

fn design_matrix(basis: &BasisSpec, ensemble: &ScenarioEnsemble, k: usize) -> Result<Array2<f64>> {
    let paths = ensemble.paths()?;
    let n_paths = ensemble.n_paths();
    let mut d = Array2::zeros((n_paths, basis.dim()));
    for m in 0..ensemble.scenarios {
        let u = ensemble.u[(m, k)];
        let y = ensemble.y[(m, k)];
        for i in 0..ensemble.particles {
            let row = ensemble.path_index(m, i);
            let x = paths.x[(row, k)];
            let l = paths.logl[(row, k)].exp();
            let a = paths.a_sigma[(row, k)];
            for (j, feat) in basis.0.iter().enumerate() {
                d[(row, j)] = match feat {
                    BasisFeature::One => 1.0,
                    BasisFeature::X => x,
                    BasisFeature::X2 => x * x,
                    BasisFeature::L => l,
                    BasisFeature::LX => l * x,
                    BasisFeature::U => u,
                    BasisFeature::Y => y,
                    BasisFeature::PathFeature => a,
                };
            }
        }
    }
    Ok(d)
}

/// Terminal conditions (xi, Theta) of the adjoint pair per path: the
/// terminal-cost gradients with the mean-field factors realized as
/// cross-ensemble averages and the scenario sample for the conditional mean.
pub fn terminal_conditions(
    c: &CoefficientSet,
    ensemble: &ScenarioEnsemble,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let paths = ensemble.paths()?;
    let n = ensemble.grid.steps();
    let n_scen = ensemble.scenarios;
    let n_part = ensemble.particles;
    let n_paths = ensemble.n_paths();
    let norm = 1.0 / n_paths as f64;

    let l_term = likelihood_column(&paths.logl, n);
    let a_l_term = scenario_sums(&l_term, ensemble);
    let u_term: Vec<f64> = (0..n_scen).map(|m| ensemble.u[(m, n)]).collect();
    let mean_l_term: f64 = a_l_term.iter().sum::<f64>() * norm;

    // population averages of Phi and dPhi/dy at each scenario's terminal mean
    let (g_dphi, h_phi): (Vec<f64>, Vec<f64>) = if c.phi_depends_y {
        let pairs: Vec<(f64, f64)> = (0..n_scen)
            .into_par_iter()
            .map(|m| {
                let y = u_term[m];
                let mut acc_d = 0.0;
                let mut acc_p = 0.0;
                for row in 0..n_paths {
                    let x = paths.x[(row, n)];
                    acc_d += (c.dphi_dy)(x, y);
                    acc_p += (c.phi)(x, y);
                }
                (acc_d * norm, acc_p * norm)
            })
            .collect();
        pairs.into_iter().unzip()
    } else {
        let mut acc_p = 0.0;
        for row in 0..n_paths {
            acc_p += (c.phi)(paths.x[(row, n)], 0.0);
        }
        (vec![0.0; n_scen], vec![acc_p * norm; n_scen])
    };

    let mut xi = vec![0.0; n_paths];
    let mut theta = vec![0.0; n_paths];
    for m in 0..n_scen {
        for i in 0..n_part {
            let row = m * n_part + i;
            let x = paths.x[(row, n)];
            let first = if c.phi_depends_y {
                let mut acc = 0.0;
                for mp in 0..n_scen {
                    acc += a_l_term[mp] * (c.dphi_dx)(x, u_term[mp]);
                }
                acc * norm
            } else {
                mean_l_term * (c.dphi_dx)(x, 0.0)
            };
            xi[row] = first + l_term[row] * g_dphi[m];
            theta[row] = h_phi[m] + (x - u_term[m]) * g_dphi[m];
        }
    }
    Ok((xi, theta))
}

/// Backward sweep producing the regression representation of
/// (p, q, q~, Q, M, M~) with the dual-projection drift.
pub fn solve_adjoint(
    c: &CoefficientSet,
    ensemble: &ScenarioEnsemble,
    basis: &BasisSpec,
) -> Result<AdjointSolution> {
    if ensemble.resampled {
        return Err(CmfError::ResampledEnsemble);
    }
    let paths = ensemble.paths()?;
    let grid = &ensemble.grid;
    let n = grid.steps();
    let dt = grid.dt();
    let n_scen = ensemble.scenarios;
    let n_part = ensemble.particles;
    let n_paths = ensemble.n_paths();
    let norm = 1.0 / n_paths as f64;
    let b = basis.dim();
    let a_f = paths.a_f();
    let table_sigma = c.kernel_sigma.table(grid);
    let table_f = if c.kernels_shared() {
        None
    } else {
        Some(c.kernel_f.table(grid))
    };

    let (xi, theta) = terminal_conditions(c, ensemble)?;

    let mut coef_p = Array2::zeros((n, b));
    let mut coef_q = Array2::zeros((n, b));
    let mut coef_qt = Array2::zeros((n, b));
    let mut coef_bigq = Array2::zeros((n, b));
    let mut coef_m = Array2::zeros((n, b));
    let mut coef_mt = Array2::zeros((n, b));
    let mut coef_gamma = Array2::zeros((n, b));
    let mut q_values = Array2::zeros((n_paths, n));
    let mut gamma: Array2<f64> = Array2::zeros((n_paths, n));
    let mut diagnostics = AdjointDiagnostics::default();
    diagnostics.p_residual_rms = vec![0.0; n];

    let mut p_next = xi.clone();
    let mut q_next = theta.clone();

    for k in (0..n).rev() {
        let t = grid.time(k);
        let ls = StepLs::new(design_matrix(basis, ensemble, k)?)?;
        if ls.ridge_used {
            diagnostics.ridge_fallbacks += 1;
        }

        // martingale integrands
        let mut tq = vec![0.0; n_paths];
        let mut tqt = vec![0.0; n_paths];
        let mut tm = vec![0.0; n_paths];
        let mut tmt = vec![0.0; n_paths];
        for m in 0..n_scen {
            let dy = ensemble.dy(m, k);
            for i in 0..n_part {
                let row = m * n_part + i;
                let db1 = ensemble.db1(m, i, k);
                tq[row] = p_next[row] * db1 / dt;
                tqt[row] = p_next[row] * dy / dt;
                tm[row] = q_next[row] * db1 / dt;
                tmt[row] = q_next[row] * dy / dt;
            }
        }
        let (cq, q_fit) = ls.fit(&tq);
        let (cqt, _) = ls.fit(&tqt);
        let (cm, _) = ls.fit(&tm);
        let (cmt, mt_fit) = ls.fit(&tmt);

        let l_col = likelihood_column(&paths.logl, k);
        let a_l = scenario_sums(&l_col, ensemble);
        
        let u_scen: Vec<f64> = (0..n_scen).map(|m| ensemble.u[(m, k)]).collect();
        let z_scen: Vec<f64> = (0..n_scen).map(|m| ensemble.controls[(m, k)]).collect();

        // population conditional-mean factors evaluated at each scenario's U
        let (e2, e3): (Vec<f64>, Vec<f64>) = if c.sigma_depends_y {
            let pairs: Vec<(f64, f64)> = (0..n_scen)
                .into_par_iter()
                .map(|m| {
                    let y = u_scen[m];
                    let mut acc2 = 0.0;
                    let mut acc3 = 0.0;
                    for mp in 0..n_scen {
                        let z = z_scen[mp];
                        for i in 0..n_part {
                            let row = mp * n_part + i;
                            let a = paths.a_sigma[(row, k)];
                            let qv = q_fit[row];
                            acc2 += qv * (c.dsigma_dy)(t, a, y, z);
                            acc3 += qv * (c.sigma)(t, a, y, z);
                        }
                    }
                    (acc2 * norm, acc3 * norm)
                })
                .collect();
            pairs.into_iter().unzip()
        } else {
            let mut acc3 = 0.0;
            for m in 0..n_scen {
                let z = z_scen[m];
                for i in 0..n_part {
                    let row = m * n_part + i;
                    acc3 += q_fit[row] * (c.sigma)(t, paths.a_sigma[(row, k)], 0.0, z);
                }
            }
            (vec![0.0; n_scen], vec![acc3 * norm; n_scen])
        };
        let (e1, e5): (Vec<f64>, Vec<f64>) = if c.f_depends_y {
            let pairs: Vec<(f64, f64)> = (0..n_scen)
                .into_par_iter()
                .map(|m| {
                    let y = u_scen[m];
                    let mut acc1 = 0.0;
                    let mut acc5 = 0.0;
                    for mp in 0..n_scen {
                        let z = z_scen[mp];
                        for i in 0..n_part {
                            let row = mp * n_part + i;
                            let af = a_f[(row, k)];
                            acc1 += (c.df_dy)(t, af, y, z);
                            acc5 += (c.f)(t, af, y, z);
                        }
                    }
                    (acc1 * norm, acc5 * norm)
                })
                .collect();
            pairs.into_iter().unzip()
        } else {
            let mut acc5 = 0.0;
            for m in 0..n_scen {
                let z = z_scen[m];
                for i in 0..n_part {
                    acc5 += (c.f)(t, a_f[(m * n_part + i, k)], 0.0, z);
                }
            }
            (vec![0.0; n_scen], vec![acc5 * norm; n_scen])
        };

        // kernel-weighted mean-field factors of the dual projections,
        // normalized like the simulator's law average
        let total_l: f64 = a_l.iter().sum();
        let mut scal_sigma = vec![0.0; n_paths];
        let mut scal_f = vec![0.0; n_paths];
        scal_sigma
            .par_chunks_mut(n_part)
            .zip(scal_f.par_chunks_mut(n_part))
            .enumerate()
            .for_each(|(m, (ss, sf))| {
                let z = z_scen[m];
                for i in 0..n_part {
                    let row = m * n_part + i;
                    let a = paths.a_sigma[(row, k)];
                    let af_own = a_f[(row, k)];
                    if c.sigma_depends_y {
                        let mut acc = 0.0;
                        for mp in 0..n_scen {
                            acc += a_l[mp] * (c.dsigma_da)(t, a, u_scen[mp], z);
                        }
                        ss[i] = acc / total_l;
                    } else {
                        ss[i] = (c.dsigma_da)(t, a, 0.0, z);
                    }
                    if c.f_depends_y {
                        let mut acc = 0.0;
                        for mp in 0..n_scen {
                            acc += a_l[mp] * (c.df_da)(t, af_own, u_scen[mp], z);
                        }
                        sf[i] = acc / total_l;
                    } else {
                        sf[i] = (c.df_da)(t, af_own, 0.0, z);
                    }
                }
            });

        // tail sums of the raw dual-projection measures on slice k and below
        {
            let tf = table_f.as_ref().unwrap_or(&table_sigma);
            gamma
                .axis_chunks_iter_mut(ndarray::Axis(0), n_part)
                .into_par_iter()
                .enumerate()
                .for_each(|(m, mut block)| {
                    for i in 0..n_part {
                        let row = m * n_part + i;
                        let qs = q_fit[row] * scal_sigma[row] * dt;
                        let fs = scal_f[row] * dt;
                        for r in 0..=k {
                            block[(i, r)] += qs * table_sigma.weight(k, r) + fs * tf.weight(k, r);
                        }
                    }
                });
        }
        let gamma_target: Vec<f64> = gamma.column(k).to_vec();
        let (cg, gamma_fit) = ls.fit(&gamma_target);

        // conditional-expectation step
        let mut target_p = vec![0.0; n_paths];
        let mut target_bigq = vec![0.0; n_paths];
        for m in 0..n_scen {
            for i in 0..n_part {
                let row = m * n_part + i;
                let x = paths.x[(row, k)];
                let drift_p =
                    l_col[row] * (e1[m] + e2[m] + mt_fit[row] * (c.dh_dx)(t, x));
                target_p[row] = p_next[row] + drift_p * dt + gamma_fit[row];
                let drift_q = e3[m]
                    + mt_fit[row] * (c.h)(t, x)
                    + (e2[m] + e1[m]) * (x - u_scen[m])
                    + e5[m];
                target_bigq[row] = q_next[row] + drift_q * dt;
            }
        }
        let (cp, p_fit) = ls.fit(&target_p);
        let (cbq, bigq_fit) = ls.fit(&target_bigq);

        // diagnostics: residual scale and normal-equation orthogonality
        let mut rss = 0.0;
        let mut ortho = vec![0.0; b];
        for row in 0..n_paths {
            let res = target_p[row] - p_fit[row];
            rss += res * res;
            for (j, v) in ls.xt.row(row).iter().enumerate() {
                ortho[j] += v * res;
            }
        }
        diagnostics.p_residual_rms[k] = (rss * norm).sqrt();
        let scale = 1.0 + target_p.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let worst = ortho
            .iter()
            .map(|v| (v * norm).abs() / scale)
            .fold(0.0, f64::max);
        if worst > diagnostics.orthogonality_max {
            diagnostics.orthogonality_max = worst;
        }

        for (dst, src) in [
            (&mut coef_p, cp),
            (&mut coef_q, cq),
            (&mut coef_qt, cqt),
            (&mut coef_bigq, cbq),
            (&mut coef_m, cm),
            (&mut coef_mt, cmt),
            (&mut coef_gamma, cg),
        ] {
            for (j, v) in src.into_iter().enumerate() {
                dst[(k, j)] = v;
            }
        }
        for row in 0..n_paths {
            q_values[(row, k)] = q_fit[row];
        }
        p_next = p_fit;
        q_next = bigq_fit;
    }

    Ok(AdjointSolution {
        basis: basis.clone(),
        coef_p,
        coef_q,
        coef_q_tilde: coef_qt,
        coef_big_q: coef_bigq,
        coef_m,
        coef_m_tilde: coef_mt,
        coef_gamma,
        xi,
        theta,
        q_values,
        diagnostics,
    })
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

    fn small_ensemble(c: &crate::model::CoefficientSet) -> ScenarioEnsemble {
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let policy = ControlPolicy::constant(0.2, c.control);
        simulate(
            c,
            &policy,
            &MarginalLawFlow::dirac(&grid, c.x0),
            &grid,
            4,
            25,
            &RngStream::new(44),
            &SimOptions {
                store_paths: true,
                resample: false,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_costs_give_identically_zero_processes() {
        let mut c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        c.f = Arc::new(|_t, _a, _y, _z| 0.0);
        c.df_da = Arc::new(|_t, _a, _y, _z| 0.0);
        c.df_dy = Arc::new(|_t, _a, _y, _z| 0.0);
        c.df_dz = Arc::new(|_t, _a, _y, _z| 0.0);
        c.phi = Arc::new(|_x, _y| 0.0);
        c.dphi_dx = Arc::new(|_x, _y| 0.0);
        c.dphi_dy = Arc::new(|_x, _y| 0.0);
        c.f_depends_y = false;
        c.phi_depends_y = false;
        let ens = small_ensemble(&c);
        let sol = solve_adjoint(&c, &ens, &BasisSpec::default_basis()).unwrap();
        assert!(sol.xi.iter().all(|&v| v == 0.0));
        assert!(sol.theta.iter().all(|&v| v == 0.0));
        assert!(sol.q_values.iter().all(|&v| v.abs() < 1e-12));
        assert!(sol.coef_p.iter().all(|&v| v.abs() < 1e-12));
        assert!(sol.coef_big_q.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn terminal_conditions_are_imposed_exactly() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let ens = small_ensemble(&c);
        let sol = solve_adjoint(&c, &ens, &BasisSpec::default_basis()).unwrap();
        let n = ens.grid.steps();
        let p_term = sol.realize(&ens, ProcessKind::P, n).unwrap();
        let q_term = sol.realize(&ens, ProcessKind::BigQ, n).unwrap();
        assert_eq!(p_term, sol.xi);
        assert_eq!(q_term, sol.theta);
    }

    // Normal equations force the fitted residual to be orthogonal to the
    // basis: the discrete martingale property of the regressed p.
    #[test]
    fn regression_residuals_are_orthogonal_to_the_basis() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let ens = small_ensemble(&c);
        let sol = solve_adjoint(&c, &ens, &BasisSpec::default_basis()).unwrap();
        // solver-precision bound; near-collinear features (L close to 1
        // early on) inflate the Gram condition number
        assert!(
            sol.diagnostics.orthogonality_max < 1e-5,
            "orthogonality defect {}",
            sol.diagnostics.orthogonality_max
        );
    }

    #[test]
    fn basis_parsing_roundtrip() {
        let names: Vec<String> = ["1", "x", "x2", "l", "lx", "u", "y", "a"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let spec = BasisSpec::parse(&names).unwrap();
        assert_eq!(spec, BasisSpec::default_basis());
        assert!(BasisSpec::parse(&["xx".to_string()]).is_err());
    }

    #[test]
    fn resampled_ensembles_are_rejected() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let mut ens = small_ensemble(&c);
        ens.resampled = true;
        match solve_adjoint(&c, &ens, &BasisSpec::default_basis()) {
            Err(CmfError::ResampledEnsemble) => {}
            other => panic!("expected resampled rejection, got {other:?}"),
        }
    }
}
