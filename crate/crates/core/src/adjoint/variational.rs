//! Variational processes (K, R): pathwise derivatives of the state and the
//! likelihood under a convex control perturbation toward a direction policy.
//!
//! Forward Euler on the coupled linear system per path, with the mean-field
//! couplings realized as cross-ensemble averages. The kernel-memory term
//! applies the diffusion kernel weights to the path's own K history.

use crate::error::{CmfError, Result};
use crate::model::CoefficientSet;
use crate::policy::ControlPolicy;
use crate::sim::ScenarioEnsemble;
use ndarray::Array2;
use rayon::prelude::*;

#[derive(Debug)]
pub struct VariationalPair {
    /// State derivative per path and node, (M*N) x (n+1), K_0 = 0.
    pub k: Array2<f64>,
    /// Likelihood derivative per path and node, R_0 = 0.
    pub r: Array2<f64>,
}

/// Solves the coupled linear variational system along the base ensemble for
/// the direction `v - u`.
pub fn solve_variational(
    c: &CoefficientSet,
    u_policy: &ControlPolicy,
    v_policy: &ControlPolicy,
    ensemble: &ScenarioEnsemble,
) -> Result<VariationalPair> {
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
    let table_sigma = c.kernel_sigma.table(grid);

    // direction values per scenario/node
    let mut dir = Array2::zeros((n_scen, n + 1));
    for m in 0..n_scen {
        let y: Vec<f64> = ensemble.y.row(m).to_vec();
        let uv = u_policy.values(grid, &y);
        let vv = v_policy.values(grid, &y);
        for k in 0..=n {
            if (uv[k] - ensemble.controls[(m, k)]).abs() > 1e-12 {
                return Err(CmfError::InvalidInput(
                    "ensemble was not simulated at the base policy".into(),
                ));
            }
            dir[(m, k)] = vv[k] - uv[k];
        }
    }

    // per-scenario owned blocks so scenarios update in parallel
    let mut k_loc: Vec<Array2<f64>> = (0..n_scen).map(|_| Array2::zeros((n_part, n + 1))).collect();
    let mut r_loc: Vec<Array2<f64>> = (0..n_scen).map(|_| Array2::zeros((n_part, n + 1))).collect();

    for step in 0..n {
        let t = grid.time(step);
        let l_col: Vec<f64> = paths.logl.column(step).iter().map(|v| v.exp()).collect();

        // cross-ensemble aggregates, fixed summation order
        let mut a_l = vec![0.0; n_scen];
        let mut a_r = vec![0.0; n_scen];
        let mut a_xr = vec![0.0; n_scen];
        let mut a_lk = vec![0.0; n_scen];
        for m in 0..n_scen {
            for i in 0..n_part {
                let row = m * n_part + i;
                let l = l_col[row];
                let r = r_loc[m][(i, step)];
                let kk = k_loc[m][(i, step)];
                a_l[m] += l;
                a_r[m] += r;
                a_xr[m] += paths.x[(row, step)] * r;
                a_lk[m] += l * kk;
            }
        }
        let total_l: f64 = a_l.iter().sum();
        let total_r: f64 = a_r.iter().sum();
        let u_scen: Vec<f64> = (0..n_scen).map(|m| ensemble.u[(m, step)]).collect();

        let result: Result<Vec<()>> = k_loc
            .par_iter_mut()
            .zip(r_loc.par_iter_mut())
            .enumerate()
            .map(|(m, (k_m, r_m))| {
                let z = ensemble.controls[(m, step)];
                let dy = ensemble.dy(m, step);
                let d_mk = dir[(m, step)];
                for i in 0..n_part {
                    let row = m * n_part + i;
                    let a = paths.a_sigma[(row, step)];
                    let x = paths.x[(row, step)];
                    let l = l_col[row];
                    let k_cur = k_m[(i, step)];
                    let r_cur = r_m[(i, step)];

                    // Likelihood-weighted coefficients normalized by the
                    // total mass, with the compensator that makes this the
                    // exact derivative of the self-normalized mean-field
                    // average (the uncompensated forms coincide in the
                    // mean-zero limit of R).
                    let (law_move, coef_da, coef_dz) = if c.sigma_depends_y {
                        let mut acc_move = 0.0;
                        let mut acc_sbar = 0.0;
                        let mut acc_da = 0.0;
                        let mut acc_dz = 0.0;
                        for mp in 0..n_scen {
                            let y = u_scen[mp];
                            let s_val = (c.sigma)(t, a, y, z);
                            let dys = (c.dsigma_dy)(t, a, y, z);
                            acc_move += s_val * a_r[mp]
                                + dys * (a_xr[mp] - y * a_r[mp] + a_lk[mp]);
                            acc_sbar += s_val * a_l[mp];
                            acc_da += (c.dsigma_da)(t, a, y, z) * a_l[mp];
                            acc_dz += (c.dsigma_dz)(t, a, y, z) * a_l[mp];
                        }
                        let sbar = acc_sbar / total_l;
                        (
                            (acc_move - total_r * sbar) / total_l,
                            acc_da / total_l,
                            acc_dz / total_l,
                        )
                    } else {
                        // the law average is constant in the law: no movement
                        (
                            0.0,
                            (c.dsigma_da)(t, a, 0.0, z),
                            (c.dsigma_dz)(t, a, 0.0, z),
                        )
                    };

                    // kernel memory applied to the path's own K history
                    let mut mem = table_sigma.alpha[step] * k_cur;
                    if let Some(kap) = &table_sigma.kap {
                        let w = kap.row(step);
                        for r in 0..step {
                            mem += k_m[(i, r)] * w[r];
                        }
                    }

                    let db1 = ensemble.db1(m, i, step);
                    let dk = (law_move + coef_da * mem + coef_dz * d_mk) * db1;
                    // exact derivative of the exponential likelihood update
                    // (Euler on the R equation would leave an O(dt) mismatch
                    // against difference quotients of the simulated paths)
                    let h_val = (c.h)(t, x);
                    let growth = (h_val * dy - 0.5 * h_val * h_val * dt).exp();
                    let r_next = r_cur * growth
                        + l * growth * (c.dh_dx)(t, x) * k_cur * (dy - h_val * dt);
                    let k_next = k_cur + dk;
                    if !(k_next.is_finite() && r_next.is_finite()) {
                        return Err(CmfError::NumericalBlowup {
                            scenario: m,
                            particle: i,
                            step,
                        });
                    }
                    k_m[(i, step + 1)] = k_next;
                    r_m[(i, step + 1)] = r_next;
                }
                Ok(())
            })
            .collect();
        result?;
    }

    let mut k_all = Array2::zeros((n_paths, n + 1));
    let mut r_all = Array2::zeros((n_paths, n + 1));
    for m in 0..n_scen {
        for i in 0..n_part {
            let row = m * n_part + i;
            for col in 0..=n {
                k_all[(row, col)] = k_loc[m][(i, col)];
                r_all[(row, col)] = r_loc[m][(i, col)];
            }
        }
    }
    Ok(VariationalPair { k: k_all, r: r_all })
}

/// Exact directional derivative of the cost functional along (K, R) and the
/// direction `v - u`: the chain rule through the terminal and running
/// mean-field averages as the simulator computes them (self-normalized
/// likelihood weights). Returns (terminal part, running part); their sum is
/// the predicted first-order change of the cost per unit perturbation.
pub fn directional_cost_derivative(
    c: &CoefficientSet,
    u_policy: &ControlPolicy,
    v_policy: &ControlPolicy,
    ensemble: &ScenarioEnsemble,
    pair: &VariationalPair,
) -> Result<(f64, f64)> {
    let paths = ensemble.paths()?;
    let a_f = paths.a_f();
    let grid = &ensemble.grid;
    let n = grid.steps();
    let dt = grid.dt();
    let n_scen = ensemble.scenarios;
    let n_part = ensemble.particles;
    let norm = 1.0 / ensemble.n_paths() as f64;
    let table_f = c.kernel_f.table(grid);

    let mut dir = Array2::zeros((n_scen, n + 1));
    for m in 0..n_scen {
        let y: Vec<f64> = ensemble.y.row(m).to_vec();
        let uv = u_policy.values(grid, &y);
        let vv = v_policy.values(grid, &y);
        for k in 0..=n {
            dir[(m, k)] = vv[k] - uv[k];
        }
    }

    // per-node aggregates needed by the law-movement terms
    let aggregates = |k: usize| {
        let l_col: Vec<f64> = paths.logl.column(k).iter().map(|v| v.exp()).collect();
        let mut a_l = vec![0.0; n_scen];
        let mut a_r = vec![0.0; n_scen];
        let mut d_m = vec![0.0; n_scen];
        for m in 0..n_scen {
            let u_m = ensemble.u[(m, k)];
            let mut a_xr = 0.0;
            let mut a_lk = 0.0;
            for i in 0..n_part {
                let row = m * n_part + i;
                a_l[m] += l_col[row];
                a_r[m] += pair.r[(row, k)];
                a_xr += paths.x[(row, k)] * pair.r[(row, k)];
                a_lk += l_col[row] * pair.k[(row, k)];
            }
            d_m[m] = a_xr - u_m * a_r[m] + a_lk;
        }
        (a_l, a_r, d_m)
    };

    // terminal part: d/dtheta of the averaged terminal cost
    let (a_l_t, a_r_t, d_t) = aggregates(n);
    let total_l_t: f64 = a_l_t.iter().sum();
    let total_r_t: f64 = a_r_t.iter().sum();
    let u_term: Vec<f64> = (0..n_scen).map(|m| ensemble.u[(m, n)]).collect();
    let terminal: f64 = (0..n_scen)
        .into_par_iter()
        .map(|m| {
            let mut acc = 0.0;
            for i in 0..n_part {
                let row = m * n_part + i;
                let x = paths.x[(row, n)];
                let (dphi_x, law_move) = if c.phi_depends_y {
                    let mut acc_dx = 0.0;
                    let mut acc_phi_r = 0.0;
                    let mut acc_phi_bar = 0.0;
                    let mut acc_dy = 0.0;
                    for mp in 0..n_scen {
                        let y = u_term[mp];
                        acc_dx += (c.dphi_dx)(x, y) * a_l_t[mp];
                        acc_phi_r += (c.phi)(x, y) * a_r_t[mp];
                        acc_phi_bar += (c.phi)(x, y) * a_l_t[mp];
                        acc_dy += (c.dphi_dy)(x, y) * d_t[mp];
                    }
                    let phi_bar = acc_phi_bar / total_l_t;
                    (
                        acc_dx / total_l_t,
                        (acc_phi_r - total_r_t * phi_bar + acc_dy) / total_l_t,
                    )
                } else {
                    ((c.dphi_dx)(x, 0.0), 0.0)
                };
                acc += dphi_x * pair.k[(row, n)] + law_move;
            }
            acc
        })
        .sum::<f64>()
        * norm;

    // running part
    let mut running = 0.0;
    for k in 0..n {
        let t = grid.time(k);
        let (a_l, a_r, d_m) = aggregates(k);
        let total_l: f64 = a_l.iter().sum();
        let total_r: f64 = a_r.iter().sum();
        let u_scen: Vec<f64> = (0..n_scen).map(|m| ensemble.u[(m, k)]).collect();

        let per_scen: Vec<f64> = (0..n_scen)
            .into_par_iter()
            .map(|m| {
                let z = ensemble.controls[(m, k)];
                let d_mk = dir[(m, k)];
                let mut acc = 0.0;
                for i in 0..n_part {
                    let row = m * n_part + i;
                    let af = a_f[(row, k)];
                    let (law_move, coef_da, coef_dz) = if c.f_depends_y {
                        let mut acc_fr = 0.0;
                        let mut acc_fbar = 0.0;
                        let mut acc_dy = 0.0;
                        let mut acc_da = 0.0;
                        let mut acc_dz = 0.0;
                        for mp in 0..n_scen {
                            let y = u_scen[mp];
                            let fv = (c.f)(t, af, y, z);
                            acc_fr += fv * a_r[mp];
                            acc_fbar += fv * a_l[mp];
                            acc_dy += (c.df_dy)(t, af, y, z) * d_m[mp];
                            acc_da += (c.df_da)(t, af, y, z) * a_l[mp];
                            acc_dz += (c.df_dz)(t, af, y, z) * a_l[mp];
                        }
                        let f_bar = acc_fbar / total_l;
                        (
                            (acc_fr - total_r * f_bar + acc_dy) / total_l,
                            acc_da / total_l,
                            acc_dz / total_l,
                        )
                    } else {
                        (
                            0.0,
                            (c.df_da)(t, af, 0.0, z),
                            (c.df_dz)(t, af, 0.0, z),
                        )
                    };
                    let mut mem = table_f.alpha[k] * pair.k[(row, k)];
                    if let Some(kap) = &table_f.kap {
                        let w = kap.row(k);
                        for r in 0..k {
                            mem += pair.k[(row, r)] * w[r];
                        }
                    }
                    acc += law_move + coef_da * mem + coef_dz * d_mk;
                }
                acc
            })
            .collect();
        running += per_scen.iter().sum::<f64>() * norm * dt;
    }
    Ok((terminal, running))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::law::MarginalLawFlow;
    use crate::model::{builtin_model, BuiltinModel, ModelParams};
    use crate::rng::RngStream;
    use crate::sim::{simulate, SimOptions};
    use std::sync::Arc;

    fn base_ensemble(c: &CoefficientSet, policy: &ControlPolicy) -> ScenarioEnsemble {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        simulate(
            c,
            policy,
            &MarginalLawFlow::dirac(&grid, c.x0),
            &grid,
            6,
            40,
            &RngStream::new(8),
            &SimOptions {
                store_paths: true,
                resample: false,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_direction_gives_zero_pair() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let u = ControlPolicy::constant(0.2, c.control);
        let ens = base_ensemble(&c, &u);
        let pair = solve_variational(&c, &u, &u, &ens).unwrap();
        assert!(pair.k.iter().all(|&v| v == 0.0));
        assert!(pair.r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn control_free_diffusion_gives_zero_pair() {
        // dsigma_dz = 0 kills the forcing, so the linear system stays at 0.
        let c = builtin_model(BuiltinModel::SeparableCost, &ModelParams::default()).unwrap();
        let u = ControlPolicy::constant(0.1, c.control);
        let v = ControlPolicy::constant(0.6, c.control);
        let ens = base_ensemble(&c, &u);
        let pair = solve_variational(&c, &u, &v, &ens).unwrap();
        assert!(pair.k.iter().all(|&v| v == 0.0));
        assert!(pair.r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_is_linear_in_the_direction() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let u = ControlPolicy::constant(0.0, c.control);
        let v1 = ControlPolicy::constant(0.2, c.control);
        let v2 = ControlPolicy::constant(0.4, c.control);
        let ens = base_ensemble(&c, &u);
        let p1 = solve_variational(&c, &u, &v1, &ens).unwrap();
        let p2 = solve_variational(&c, &u, &v2, &ens).unwrap();
        let scale = |a: &Array2<f64>, b: &Array2<f64>| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (2.0 * x - y).abs())
                .fold(0.0f64, f64::max)
        };
        let norm_k = p2.k.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(
            scale(&p1.k, &p2.k) <= 1e-10 * (1.0 + norm_k),
            "K not linear: {}",
            scale(&p1.k, &p2.k)
        );
        let norm_r = p2.r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(scale(&p1.r, &p2.r) <= 1e-10 * (1.0 + norm_r));
    }

    #[test]
    fn wrong_base_policy_is_rejected() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let u = ControlPolicy::constant(0.2, c.control);
        let other = ControlPolicy::constant(0.5, c.control);
        let ens = base_ensemble(&c, &u);
        assert!(solve_variational(&c, &other, &u, &ens).is_err());
    }

    #[test]
    fn resampled_ensembles_are_rejected() {
        let mut c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        c.h = Arc::new(|_t, x: f64| 2.0 * x.tanh());
        let grid = TimeGrid::new(1.0, 30).unwrap();
        let u = ControlPolicy::constant(0.2, c.control);
        let ens = simulate(
            &c,
            &u,
            &MarginalLawFlow::dirac(&grid, c.x0),
            &grid,
            4,
            30,
            &RngStream::new(2),
            &SimOptions {
                store_paths: true,
                resample: true,
            },
        )
        .unwrap();
        if ens.resampled {
            match solve_variational(&c, &u, &u, &ens) {
                Err(CmfError::ResampledEnsemble) => {}
                other => panic!("expected resampled error, got {other:?}"),
            }
        }
    }
}
