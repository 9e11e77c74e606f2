//! Forward solver on the reference space: simulates state and likelihood per
//! scenario/particle under a given law flow and control, and forms the
//! Kallianpur-Striebel conditional means and unnormalized statistics.
//!
//! Layout: M outer scenarios carry the common observation path (the
//! conditioning variable), N inner particles carry the state noise. The
//! conditional mean per scenario is the ratio U = S / S0 of likelihood-
//! weighted particle averages, computed in log domain with max-shift scaling.

use crate::error::{CmfError, Result};
use crate::grid::TimeGrid;
use crate::law::MarginalLawFlow;
use crate::model::CoefficientSet;
use crate::policy::ControlPolicy;
use crate::rng::{brownian_increments, Channel, RngStream};
use ndarray::{Array2, ArrayViewMut2, Axis};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Keep per-particle paths (required by the adjoint and variational
    /// solvers and by particle dumps).
    pub store_paths: bool,
    /// Systematic resampling when the effective sample size drops below N/2.
    /// Invalidates pathwise identities; adjoint runs reject such ensembles.
    pub resample: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            store_paths: false,
            resample: false,
        }
    }
}

/// Per-particle data kept when `store_paths` is set. Rows are paths indexed
/// by `m * particles + i`, columns are grid nodes.
#[derive(Debug)]
pub struct ParticlePaths {
    pub x: Array2<f64>,
    pub logl: Array2<f64>,
    /// Path feature under the diffusion kernel.
    pub a_sigma: Array2<f64>,
    /// Path feature under the cost kernel; `None` when the kernels coincide.
    pub a_f: Option<Array2<f64>>,
}

impl ParticlePaths {
    #[inline]
    pub fn a_f(&self) -> &Array2<f64> {
        self.a_f.as_ref().unwrap_or(&self.a_sigma)
    }
}

/// Nested Monte Carlo state produced by [`simulate`].
#[derive(Debug)]
pub struct ScenarioEnsemble {
    pub grid: TimeGrid,
    pub scenarios: usize,
    pub particles: usize,
    seed: u64,
    /// Observation paths, M x (n+1).
    pub y: Array2<f64>,
    /// Policy values along each observation path, M x (n+1).
    pub controls: Array2<f64>,
    /// Conditional mean U = S / S0, M x (n+1).
    pub u: Array2<f64>,
    /// Unnormalized conditional moment S, M x (n+1).
    pub s: Array2<f64>,
    /// Unnormalized mass S0 (positive), M x (n+1).
    pub s0: Array2<f64>,
    /// Effective sample size per scenario and node.
    pub ess: Array2<f64>,
    /// Self-normalized estimate of E[h(t, X_t) | Y] per scenario and node.
    pub pi_h: Array2<f64>,
    /// Self-normalized estimate of E[X_t h(t, X_t) | Y].
    pub pi_xh: Array2<f64>,
    pub resampled: bool,
    paths: Option<ParticlePaths>,
}

impl ScenarioEnsemble {
    #[inline]
    pub fn path_index(&self, m: usize, i: usize) -> usize {
        m * self.particles + i
    }

    #[inline]
    pub fn n_paths(&self) -> usize {
        self.scenarios * self.particles
    }

    pub fn paths(&self) -> Result<&ParticlePaths> {
        self.paths.as_ref().ok_or_else(|| {
            CmfError::InvalidInput("ensemble was simulated without stored particle paths".into())
        })
    }

    /// State-noise increment of path (m, i) over step k, bit-identical to the
    /// one used during simulation (regenerated from the stream).
    #[inline]
    pub fn db1(&self, m: usize, i: usize, k: usize) -> f64 {
        self.grid.dt().sqrt() * RngStream::new(self.seed).normal(m, i, k, Channel::State)
    }

    /// Observation increment of scenario m over step k.
    #[inline]
    pub fn dy(&self, m: usize, k: usize) -> f64 {
        self.grid.dt().sqrt() * RngStream::new(self.seed).normal(m, 0, k, Channel::Observation)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn explode<'a>(
    v: Option<Vec<ArrayViewMut2<'a, f64>>>,
    scenarios: usize,
) -> Vec<Option<ArrayViewMut2<'a, f64>>> {
    match v {
        Some(list) => list.into_iter().map(Some).collect(),
        None => (0..scenarios).map(|_| None).collect(),
    }
}

struct ScenarioSlot<'a> {
    m: usize,
    y: ndarray::ArrayViewMut1<'a, f64>,
    controls: ndarray::ArrayViewMut1<'a, f64>,
    u: ndarray::ArrayViewMut1<'a, f64>,
    s: ndarray::ArrayViewMut1<'a, f64>,
    s0: ndarray::ArrayViewMut1<'a, f64>,
    ess: ndarray::ArrayViewMut1<'a, f64>,
    pi_h: ndarray::ArrayViewMut1<'a, f64>,
    pi_xh: ndarray::ArrayViewMut1<'a, f64>,
    x: Option<ArrayViewMut2<'a, f64>>,
    logl: Option<ArrayViewMut2<'a, f64>>,
    a_sigma: Option<ArrayViewMut2<'a, f64>>,
    a_f: Option<ArrayViewMut2<'a, f64>>,
}

/// Euler-Maruyama forward pass with left-point coefficients.
///
/// Per scenario m: the observation path is Brownian under the reference
/// measure, the control is a functional of it, and every particle i evolves
/// as `X_{k+1} = X_k + sigma_bar(t_k, a_k, mu_k, u_k) dB1` with
/// `log L_{k+1} = log L_k + h(t_k, X_k) dY_k - h(t_k, X_k)^2 dt / 2`.
pub fn simulate(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    flow: &MarginalLawFlow,
    grid: &TimeGrid,
    scenarios: usize,
    particles: usize,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<ScenarioEnsemble> {
    if !flow.grid().same_grid(grid) {
        return Err(CmfError::GridMismatch(
            "law flow lives on a different grid".into(),
        ));
    }
    if scenarios < 2 || particles < 2 {
        return Err(CmfError::InvalidInput(format!(
            "need at least 2 scenarios and 2 particles, got M={scenarios}, N={particles}"
        )));
    }
    let n = grid.steps();
    let nodes = n + 1;
    let n_paths = scenarios * particles;

    let mut y = Array2::zeros((scenarios, nodes));
    let mut controls = Array2::zeros((scenarios, nodes));
    let mut u = Array2::zeros((scenarios, nodes));
    let mut s = Array2::zeros((scenarios, nodes));
    let mut s0 = Array2::zeros((scenarios, nodes));
    let mut ess = Array2::zeros((scenarios, nodes));
    let mut pi_h = Array2::zeros((scenarios, nodes));
    let mut pi_xh = Array2::zeros((scenarios, nodes));

    let kernels_shared = c.kernels_shared();
    let table_sigma = c.kernel_sigma.table(grid);
    let table_f = if kernels_shared {
        None
    } else {
        Some(c.kernel_f.table(grid))
    };

    let (mut x_all, mut logl_all, mut a_all, mut af_all) = if opts.store_paths {
        (
            Some(Array2::zeros((n_paths, nodes))),
            Some(Array2::zeros((n_paths, nodes))),
            Some(Array2::zeros((n_paths, nodes))),
            table_f
                .as_ref()
                .map(|_| Array2::zeros((n_paths, nodes))),
        )
    } else {
        (None, None, None, None)
    };

    // carve disjoint per-scenario views so scenarios can run in parallel;
    // the borrows end with this block, releasing the arrays for the move
    let resampled = {
        let mut xs = explode(
            x_all
                .as_mut()
                .map(|a| a.axis_chunks_iter_mut(Axis(0), particles).collect()),
            scenarios,
        )
        .into_iter();
        let mut ls = explode(
            logl_all
                .as_mut()
                .map(|a| a.axis_chunks_iter_mut(Axis(0), particles).collect()),
            scenarios,
        )
        .into_iter();
        let mut asg = explode(
            a_all
                .as_mut()
                .map(|a| a.axis_chunks_iter_mut(Axis(0), particles).collect()),
            scenarios,
        )
        .into_iter();
        let mut afs = explode(
            af_all
                .as_mut()
                .map(|a| a.axis_chunks_iter_mut(Axis(0), particles).collect()),
            scenarios,
        )
        .into_iter();
        let mut y_it = y.axis_iter_mut(Axis(0));
        let mut c_it = controls.axis_iter_mut(Axis(0));
        let mut u_it = u.axis_iter_mut(Axis(0));
        let mut s_it = s.axis_iter_mut(Axis(0));
        let mut s0_it = s0.axis_iter_mut(Axis(0));
        let mut e_it = ess.axis_iter_mut(Axis(0));
        let mut ph_it = pi_h.axis_iter_mut(Axis(0));
        let mut pxh_it = pi_xh.axis_iter_mut(Axis(0));
        let mut slots: Vec<ScenarioSlot> = (0..scenarios)
            .map(|m| ScenarioSlot {
                m,
                y: y_it.next().unwrap(),
                controls: c_it.next().unwrap(),
                u: u_it.next().unwrap(),
                s: s_it.next().unwrap(),
                s0: s0_it.next().unwrap(),
                ess: e_it.next().unwrap(),
                pi_h: ph_it.next().unwrap(),
                pi_xh: pxh_it.next().unwrap(),
                x: xs.next().unwrap(),
                logl: ls.next().unwrap(),
                a_sigma: asg.next().unwrap(),
                a_f: afs.next().unwrap(),
            })
            .collect();

        let results: Vec<Result<bool>> = slots
            .par_iter_mut()
            .map(|slot| {
                simulate_scenario(
                    c,
                    policy,
                    flow,
                    grid,
                    particles,
                    stream,
                    opts,
                    &table_sigma,
                    table_f.as_ref(),
                    slot,
                )
            })
            .collect();
        let mut resampled = false;
        for r in results {
            resampled |= r?;
        }
        resampled
    };

    Ok(ScenarioEnsemble {
        grid: grid.clone(),
        scenarios,
        particles,
        seed: stream.seed(),
        y,
        controls,
        u,
        s,
        s0,
        ess,
        pi_h,
        pi_xh,
        resampled,
        paths: x_all.map(|x| ParticlePaths {
            x,
            logl: logl_all.unwrap(),
            a_sigma: a_all.unwrap(),
            a_f: af_all,
        }),
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_scenario(
    c: &CoefficientSet,
    policy: &ControlPolicy,
    flow: &MarginalLawFlow,
    grid: &TimeGrid,
    particles: usize,
    stream: &RngStream,
    opts: &SimOptions,
    table_sigma: &crate::model::KernelTable,
    table_f: Option<&crate::model::KernelTable>,
    slot: &mut ScenarioSlot,
) -> Result<bool> {
    let m = slot.m;
    let n = grid.steps();
    let dt = grid.dt();

    // observation path (Brownian under the reference measure)
    let (_, y_inc) = brownian_increments(stream, grid, m, 0);
    slot.y[0] = 0.0;
    for k in 0..n {
        slot.y[k + 1] = slot.y[k] + y_inc[k];
    }
    let y_path: Vec<f64> = slot.y.iter().copied().collect();
    let u_vals = policy.values(grid, &y_path);
    for (k, v) in u_vals.iter().enumerate() {
        slot.controls[k] = *v;
    }

    // local particle state
    let mut x_loc = Array2::<f64>::zeros((particles, n + 1));
    let mut logl_loc = Array2::<f64>::zeros((particles, n + 1));
    let mut a_loc = Array2::<f64>::zeros((particles, n + 1));
    let mut af_loc = table_f.map(|_| Array2::<f64>::zeros((particles, n + 1)));
    for i in 0..particles {
        x_loc[(i, 0)] = c.x0;
        let row = x_loc.row(i);
        a_loc[(i, 0)] = table_sigma.feature(row.as_slice().unwrap(), 0);
        if let (Some(af), Some(tf)) = (&mut af_loc, table_f) {
            af[(i, 0)] = tf.feature(row.as_slice().unwrap(), 0);
        }
    }

    let mut resampled = false;
    for k in 0..=n {
        let t = grid.time(k);

        // weights via max-shift so the exact h == 0 case stays exact
        let mut max_log = f64::NEG_INFINITY;
        for i in 0..particles {
            let v = logl_loc[(i, k)];
            if !v.is_finite() {
                return Err(CmfError::NumericalBlowup {
                    scenario: m,
                    particle: i,
                    step: k,
                });
            }
            if v > max_log {
                max_log = v;
            }
        }
        let mut sw = 0.0;
        let mut sw2 = 0.0;
        let mut swx = 0.0;
        let mut swh = 0.0;
        let mut swxh = 0.0;
        for i in 0..particles {
            let w = (logl_loc[(i, k)] - max_log).exp();
            let xi = x_loc[(i, k)];
            let hi = (c.h)(t, xi);
            sw += w;
            sw2 += w * w;
            swx += w * xi;
            swh += w * hi;
            swxh += w * xi * hi;
        }
        let scale = max_log.exp();
        let s0_k = scale * (sw / particles as f64);
        let s_k = scale * (swx / particles as f64);
        if !(s0_k.is_finite() && s0_k > 0.0) {
            return Err(CmfError::Degeneracy {
                scenario: m,
                step: k,
                detail: format!(
                    "S0 = {s0_k:e} after max-shift scaling (max log-likelihood {max_log:e})"
                ),
            });
        }
        slot.s0[k] = s0_k;
        slot.s[k] = s_k;
        slot.u[k] = s_k / s0_k;
        slot.ess[k] = sw * sw / sw2;
        slot.pi_h[k] = swh / sw;
        slot.pi_xh[k] = swxh / sw;

        if opts.resample && slot.ess[k] < particles as f64 / 2.0 {
            resampled = true;
            systematic_resample(
                stream,
                m,
                k,
                particles,
                max_log,
                sw,
                &mut x_loc,
                &mut logl_loc,
                &mut a_loc,
                af_loc.as_mut(),
            );
        }

        if k == n {
            break;
        }

        // advance every particle over [t_k, t_{k+1})
        let law = flow.law(k);
        let z = u_vals[k];
        let dy = y_inc[k];
        for i in 0..particles {
            let xi = x_loc[(i, k)];
            let a = a_loc[(i, k)];
            let sbar = c.sigma_bar(t, a, law, z);
            let db1 = grid.dt().sqrt() * stream.normal(m, i, k, Channel::State);
            let x_next = xi + sbar * db1;
            let hi = (c.h)(t, xi);
            let logl_next = logl_loc[(i, k)] + hi * dy - 0.5 * hi * hi * dt;
            if !(x_next.is_finite() && logl_next.is_finite()) {
                return Err(CmfError::NumericalBlowup {
                    scenario: m,
                    particle: i,
                    step: k,
                });
            }
            x_loc[(i, k + 1)] = x_next;
            logl_loc[(i, k + 1)] = logl_next;
            let row = x_loc.row(i);
            let path = &row.as_slice().unwrap()[..=k + 1];
            a_loc[(i, k + 1)] = table_sigma.feature(path, k + 1);
            if let (Some(af), Some(tf)) = (&mut af_loc, table_f) {
                af[(i, k + 1)] = tf.feature(path, k + 1);
            }
        }
    }

    if let (Some(x), Some(l), Some(a)) = (&mut slot.x, &mut slot.logl, &mut slot.a_sigma) {
        x.assign(&x_loc);
        l.assign(&logl_loc);
        a.assign(&a_loc);
        if let (Some(af_dst), Some(af_src)) = (&mut slot.a_f, &af_loc) {
            af_dst.assign(af_src);
        }
    }
    Ok(resampled)
}

#[allow(clippy::too_many_arguments)]
fn systematic_resample(
    stream: &RngStream,
    m: usize,
    k: usize,
    particles: usize,
    max_log: f64,
    sw: f64,
    x: &mut Array2<f64>,
    logl: &mut Array2<f64>,
    a: &mut Array2<f64>,
    af: Option<&mut Array2<f64>>,
) {
    let offset = stream.uniform(m, 0, k, Channel::Probe);
    let mut cum = 0.0;
    let mut cumulative = Vec::with_capacity(particles);
    for i in 0..particles {
        cum += (logl[(i, k)] - max_log).exp() / sw;
        cumulative.push(cum);
    }
    let mut picks = Vec::with_capacity(particles);
    let mut j = 0usize;
    for i in 0..particles {
        let target = (i as f64 + offset) / particles as f64;
        while j + 1 < particles && cumulative[j] < target {
            j += 1;
        }
        picks.push(j);
    }
    // equal weights preserving the unnormalized mass estimate
    let log_mean = max_log + (sw / particles as f64).ln();
    let clone_rows = |arr: &mut Array2<f64>| {
        let snapshot = arr.slice(ndarray::s![.., ..=k]).to_owned();
        for (i, &src) in picks.iter().enumerate() {
            for col in 0..=k {
                arr[(i, col)] = snapshot[(src, col)];
            }
        }
    };
    clone_rows(x);
    clone_rows(a);
    if let Some(af) = af {
        clone_rows(af);
    }
    let snapshot_l = logl.slice(ndarray::s![.., ..=k]).to_owned();
    for (i, &src) in picks.iter().enumerate() {
        for col in 0..k {
            logl[(i, col)] = snapshot_l[(src, col)];
        }
        logl[(i, k)] = log_mean;
    }
}

/// Alternative filter path from the discretized normalized filtering
/// equation, driven purely by the self-normalized moment estimates; used to
/// cross-validate the Kallianpur-Striebel ratio.
pub fn fkk_propagate(ensemble: &ScenarioEnsemble, c: &CoefficientSet) -> Array2<f64> {
    let _ = c;
    let n = ensemble.grid.steps();
    let dt = ensemble.grid.dt();
    let mut out = Array2::zeros((ensemble.scenarios, n + 1));
    for m in 0..ensemble.scenarios {
        out[(m, 0)] = ensemble.u[(m, 0)];
        for k in 0..n {
            let pi_h = ensemble.pi_h[(m, k)];
            let pi_xh = ensemble.pi_xh[(m, k)];
            let u = ensemble.u[(m, k)];
            let dy = ensemble.y[(m, k + 1)] - ensemble.y[(m, k)];
            let gain = pi_xh - u * pi_h;
            let drift = u * pi_h * pi_h - pi_xh * pi_h;
            out[(m, k + 1)] = out[(m, k)] + gain * dy + drift * dt;
        }
    }
    out
}

/// Per-scenario sup over time of |S_t - U_t exp(int pi(h) dY - 1/2 int
/// pi(h)^2 ds)|: the discrete defect of the unnormalized-vs-normalized
/// consistency identity.
pub fn zakai_consistency(ensemble: &ScenarioEnsemble, c: &CoefficientSet) -> Vec<f64> {
    let _ = c;
    let n = ensemble.grid.steps();
    let dt = ensemble.grid.dt();
    let mut out = Vec::with_capacity(ensemble.scenarios);
    for m in 0..ensemble.scenarios {
        let mut exponent = 0.0f64;
        let mut worst: f64 = 0.0;
        for k in 0..=n {
            let rhs = ensemble.u[(m, k)] * exponent.exp();
            worst = worst.max((ensemble.s[(m, k)] - rhs).abs());
            if k < n {
                let pi_h = ensemble.pi_h[(m, k)];
                let dy = ensemble.y[(m, k + 1)] - ensemble.y[(m, k)];
                exponent += pi_h * dy - 0.5 * pi_h * pi_h * dt;
            }
        }
        out.push(worst);
    }
    out
}

/// |mean(L_T) - 1| and its Monte Carlo standard error, treating per-scenario
/// means as independent replicates.
pub fn martingale_check(ensemble: &ScenarioEnsemble) -> (f64, f64) {
    let n = ensemble.grid.steps();
    let m = ensemble.scenarios as f64;
    let means: Vec<f64> = (0..ensemble.scenarios)
        .map(|s| ensemble.s0[(s, n)])
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let var = means.iter().map(|v| (v - grand) * (v - grand)).sum::<f64>() / (m - 1.0);
    ((grand - 1.0).abs(), (var / m).sqrt())
}
