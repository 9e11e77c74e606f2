//! Coefficient quadruple (sigma, h, f, Phi), partial derivatives, and the
//! affine path-feature kernel that carries all path dependence.
//!
//! Path dependence is restricted to the feature
//! `a_t(phi) = alpha0(t) * phi(t) + int_0^t phi(r) kappa(t, r) dr`,
//! so the Frechet derivative in the path argument is exactly representable by
//! the kernel weights; the adjoint's dual-projection terms rely on this.

mod builtin;
mod validate;

pub use builtin::{builtin_model, BuiltinModel, ModelParams};
pub use validate::{check_derivatives, validate_assumptions, AssumptionReport, BoundEstimate, DerivativeReport};

use crate::grid::TimeGrid;
use ndarray::Array2;
use std::sync::Arc;

/// Scalar function of time.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Kernel density `(t, r) -> real`, supported on `r <= t`.
pub type KernelFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `(t, x)` functions: observation drift and its derivative.
pub type ObsFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `(t, a, y, z)` functions: diffusion / running cost and their partials.
pub type CoeffFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
/// `(x, y)` functions: terminal cost and its partials.
pub type TerminalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// The map `a_t(phi) = alpha0(t) phi(t) + int_0^t phi(r) kappa(t, r) dr`
/// with total-mass bound `|alpha0(t)| + int |kappa(t, .)| <= mass_bound`.
#[derive(Clone)]
pub struct PathFeatureKernel {
    alpha0: TimeFn,
    kappa: Option<KernelFn>,
    mass_bound: f64,
}

impl PathFeatureKernel {
    pub fn new(alpha0: TimeFn, kappa: KernelFn, mass_bound: f64) -> Self {
        Self {
            alpha0,
            kappa: Some(kappa),
            mass_bound,
        }
    }

    /// Kernel without memory: `a_t(phi) = alpha0(t) phi(t)`.
    pub fn pointwise(alpha0: TimeFn) -> Self {
        let bound = 0.0; // caller-declared bound is recomputed below
        let _ = bound;
        Self {
            mass_bound: f64::INFINITY,
            alpha0,
            kappa: None,
        }
    }

    pub fn with_mass_bound(mut self, bound: f64) -> Self {
        self.mass_bound = bound;
        self
    }

    #[inline]
    pub fn alpha0(&self, t: f64) -> f64 {
        (self.alpha0)(t)
    }

    #[inline]
    pub fn kappa(&self, t: f64, r: f64) -> f64 {
        match &self.kappa {
            Some(k) => k(t, r),
            None => 0.0,
        }
    }

    #[inline]
    pub fn is_pointwise(&self) -> bool {
        self.kappa.is_none()
    }

    pub fn mass_bound(&self) -> f64 {
        self.mass_bound
    }

    /// Same underlying functions (used to share feature computations).
    pub fn same_as(&self, other: &PathFeatureKernel) -> bool {
        let alpha_eq = Arc::ptr_eq(&self.alpha0, &other.alpha0);
        let kappa_eq = match (&self.kappa, &other.kappa) {
            (None, None) => true,
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            _ => false,
        };
        alpha_eq && kappa_eq
    }

    /// Precompute grid weights; hot loops index the table instead of calling
    /// the closures.
    pub fn table(&self, grid: &TimeGrid) -> KernelTable {
        let n = grid.steps();
        let alpha: Vec<f64> = (0..=n).map(|k| self.alpha0(grid.time(k))).collect();
        let kap = if self.is_pointwise() {
            None
        } else {
            // kap[(k, r)] = kappa(t_k, t_r) * dt for r < k (left-point rule)
            let mut m = Array2::zeros((n + 1, n + 1));
            for k in 0..=n {
                let tk = grid.time(k);
                for r in 0..k {
                    m[(k, r)] = self.kappa(tk, grid.time(r)) * grid.dt();
                }
            }
            Some(m)
        };
        KernelTable { alpha, kap }
    }

    /// Empirical mass `|alpha0(t_k)| + sum_{r<k} |kappa(t_k, t_r)| dt` per node.
    pub fn grid_mass(&self, grid: &TimeGrid) -> Vec<f64> {
        let table = self.table(grid);
        (0..=grid.steps())
            .map(|k| {
                let mut m = table.alpha[k].abs();
                if let Some(kap) = &table.kap {
                    for r in 0..k {
                        m += kap[(k, r)].abs();
                    }
                }
                m
            })
            .collect()
    }
}

/// Grid-sampled kernel weights.
pub struct KernelTable {
    /// alpha0 at each node.
    pub alpha: Vec<f64>,
    /// `kappa(t_k, t_r) * dt` for `r < k`; None for pointwise kernels.
    pub kap: Option<Array2<f64>>,
}

impl KernelTable {
    /// Feature of `path` (values at nodes `0..=k`) at node `k`.
    #[inline]
    pub fn feature(&self, path: &[f64], k: usize) -> f64 {
        let mut a = self.alpha[k] * path[k];
        if let Some(kap) = &self.kap {
            let row = kap.row(k);
            for r in 0..k {
                a += path[r] * row[r];
            }
        }
        a
    }

    /// Discrete weight of the induced measure `ell(t_j, .)` at node `k <= j`:
    /// the atom `alpha0(t_j)` at `k = j` plus the density slice for `k < j`.
    #[inline]
    pub fn weight(&self, j: usize, k: usize) -> f64 {
        if k == j {
            self.alpha[j]
        } else if k < j {
            match &self.kap {
                Some(kap) => kap[(j, k)],
                None => 0.0,
            }
        } else {
            0.0
        }
    }
}

/// Closed interval control set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ControlBounds {
    #[inline]
    pub fn clip(&self, z: f64) -> f64 {
        z.clamp(self.lo, self.hi)
    }

    #[inline]
    pub fn interior(&self, z: f64) -> bool {
        z > self.lo && z < self.hi
    }
}

/// Model coefficients with declared partial derivatives.
///
/// `sigma` and `f` take `(t, a, y, z)` where `a` is the path feature under
/// the respective kernel, `y` the conditional-mean argument, `z` the control.
/// The `*_depends_y` hints let evaluation skip the law average when a
/// coefficient ignores `y`; they must be conservative (true is always safe).
#[derive(Clone)]
pub struct CoefficientSet {
    pub sigma: CoeffFn,
    pub dsigma_da: CoeffFn,
    pub dsigma_dy: CoeffFn,
    pub dsigma_dz: CoeffFn,
    pub h: ObsFn,
    pub dh_dx: ObsFn,
    pub f: CoeffFn,
    pub df_da: CoeffFn,
    pub df_dy: CoeffFn,
    pub df_dz: CoeffFn,
    pub phi: TerminalFn,
    pub dphi_dx: TerminalFn,
    pub dphi_dy: TerminalFn,
    pub kernel_sigma: PathFeatureKernel,
    pub kernel_f: PathFeatureKernel,
    pub control: ControlBounds,
    pub x0: f64,
    pub sigma_depends_y: bool,
    pub f_depends_y: bool,
    pub phi_depends_y: bool,
}

impl CoefficientSet {
    /// Law-averaged diffusion `int sigma(t, a, y, z) mu(dy)`.
    #[inline]
    pub fn sigma_bar(&self, t: f64, a: f64, law: &crate::law::EmpiricalLaw, z: f64) -> f64 {
        if self.sigma_depends_y {
            law.integrate(|y| (self.sigma)(t, a, y, z))
        } else {
            (self.sigma)(t, a, 0.0, z)
        }
    }

    /// Law-averaged running cost.
    #[inline]
    pub fn f_bar(&self, t: f64, a: f64, law: &crate::law::EmpiricalLaw, z: f64) -> f64 {
        if self.f_depends_y {
            law.integrate(|y| (self.f)(t, a, y, z))
        } else {
            (self.f)(t, a, 0.0, z)
        }
    }

    /// Law-averaged terminal cost.
    #[inline]
    pub fn phi_bar(&self, x: f64, law: &crate::law::EmpiricalLaw) -> f64 {
        if self.phi_depends_y {
            law.integrate(|y| (self.phi)(x, y))
        } else {
            (self.phi)(x, 0.0)
        }
    }

    pub fn kernels_shared(&self) -> bool {
        self.kernel_sigma.same_as(&self.kernel_f)
    }
}
