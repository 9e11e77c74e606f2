//! Built-in coefficient sets.
//!
//! `bounded_sigmoid` satisfies every standing boundedness assumption;
//! `linear_gaussian` deliberately violates them but admits the Kalman-Bucy
//! oracle and is confined to oracle tests; the remaining models switch off
//! one structural feature each.

use super::{CoefficientSet, ControlBounds, PathFeatureKernel};
use crate::error::{CmfError, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Scalar parameters shared by the built-in models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Diffusion scale.
    pub sigma0: f64,
    /// Observation drift scale.
    pub h0: f64,
    /// Observation slope of the linear-Gaussian model.
    pub c: f64,
    /// Quadratic control-cost weight.
    pub rho: f64,
    /// Target control of the separable cost.
    pub zstar: f64,
    /// Declared kernel mass bound.
    pub kernel_mass: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub x0: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            h0: 1.0,
            c: 1.0,
            rho: 0.0,
            zstar: 0.0,
            kernel_mass: 1.0,
            u_min: -1.0,
            u_max: 1.0,
            x0: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinModel {
    /// Fully bounded: sigma = sigma0 (.4 + .2 tanh a + .2 tanh y + .2 tanh z),
    /// h = h0 x / (1 + x^2), f = tanh(a)^2 + rho z^2, Phi = tanh(x) tanh(y).
    BoundedSigmoid,
    /// sigma = sigma0, h = c x, f = rho z^2, Phi = (x - y)^2.
    LinearGaussian,
    /// BoundedSigmoid with sigma independent of the mean-field argument.
    NoMeanfield,
    /// BoundedSigmoid with h = 0.
    ZeroObservation,
    /// Control-separable cost f = (z - zstar)^2 with z-free sigma and Phi = 0.
    SeparableCost,
}

impl BuiltinModel {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "bounded_sigmoid" => Ok(Self::BoundedSigmoid),
            "linear_gaussian" => Ok(Self::LinearGaussian),
            "no_meanfield" => Ok(Self::NoMeanfield),
            "zero_observation" => Ok(Self::ZeroObservation),
            "separable_cost" => Ok(Self::SeparableCost),
            other => Err(CmfError::InvalidInput(format!(
                "unknown model '{other}'; expected one of bounded_sigmoid, linear_gaussian, \
                 no_meanfield, zero_observation, separable_cost"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BoundedSigmoid => "bounded_sigmoid",
            Self::LinearGaussian => "linear_gaussian",
            Self::NoMeanfield => "no_meanfield",
            Self::ZeroObservation => "zero_observation",
            Self::SeparableCost => "separable_cost",
        }
    }
}

#[inline]
fn sech2(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

/// Exponential-memory kernel alpha0 = 0.6, kappa(t, r) = 0.8 e^{-2(t-r)};
/// mass 0.6 + 0.4 (1 - e^{-2t}) <= 1.
fn memory_kernel(mass_bound: f64) -> PathFeatureKernel {
    PathFeatureKernel::new(
        Arc::new(|_t| 0.6),
        Arc::new(|t: f64, r: f64| 0.8 * (-2.0 * (t - r)).exp()),
        mass_bound,
    )
}

fn identity_kernel() -> PathFeatureKernel {
    PathFeatureKernel::pointwise(Arc::new(|_t| 1.0)).with_mass_bound(1.0)
}

fn zero_obs() -> (super::ObsFn, super::ObsFn) {
    (Arc::new(|_t, _x| 0.0), Arc::new(|_t, _x| 0.0))
}

// Rational sigmoid: bounded with x*h and x^2*dh bounded as well, which the
// plain tanh drift would violate.
fn rational_obs(h0: f64) -> (super::ObsFn, super::ObsFn) {
    (
        Arc::new(move |_t, x: f64| h0 * x / (1.0 + x * x)),
        Arc::new(move |_t, x: f64| {
            let d = 1.0 + x * x;
            h0 * (1.0 - x * x) / (d * d)
        }),
    )
}

/// Construct a built-in model from its parameters.
pub fn builtin_model(model: BuiltinModel, p: &ModelParams) -> Result<CoefficientSet> {
    if !(p.u_min < p.u_max) {
        return Err(CmfError::InvalidInput(format!(
            "control interval [{}, {}] is empty",
            p.u_min, p.u_max
        )));
    }
    let control = ControlBounds {
        lo: p.u_min,
        hi: p.u_max,
    };
    let s0 = p.sigma0;
    let rho = p.rho;
    let zstar = p.zstar;

    // Bounded diffusion with separately saturating arguments, so that
    // y * dsigma_dy stays bounded uniformly in the path feature (a shared
    // saturation would let large y and a ~ -y cancel inside it).
    let tanh_sigma: super::CoeffFn = Arc::new(move |_t, a: f64, y: f64, z: f64| {
        s0 * (0.4 + 0.2 * (a.tanh() + y.tanh() + z.tanh()))
    });
    let sig_da: super::CoeffFn = Arc::new(move |_t, a: f64, _y, _z| 0.2 * s0 * sech2(a));
    let sig_dy: super::CoeffFn = Arc::new(move |_t, _a, y: f64, _z| 0.2 * s0 * sech2(y));
    let sig_dz: super::CoeffFn = Arc::new(move |_t, _a, _y, z: f64| 0.2 * s0 * sech2(z));
    let bounded_f: super::CoeffFn = Arc::new(move |_t, a: f64, _y, z: f64| {
        let ta = a.tanh();
        ta * ta + rho * z * z
    });
    let bounded_f_da: super::CoeffFn =
        Arc::new(move |_t, a: f64, _y, _z| 2.0 * a.tanh() * sech2(a));
    let zero4: super::CoeffFn = Arc::new(|_t, _a, _y, _z| 0.0);
    let bounded_f_dz: super::CoeffFn = Arc::new(move |_t, _a, _y, z: f64| 2.0 * rho * z);
    let bounded_phi: super::TerminalFn = Arc::new(|x: f64, y: f64| x.tanh() * y.tanh());
    let bounded_phi_dx: super::TerminalFn = Arc::new(|x: f64, y: f64| sech2(x) * y.tanh());
    let bounded_phi_dy: super::TerminalFn = Arc::new(|x: f64, y: f64| x.tanh() * sech2(y));

    let set = match model {
        BuiltinModel::BoundedSigmoid
        | BuiltinModel::ZeroObservation
        | BuiltinModel::NoMeanfield => {
            let kernel = memory_kernel(p.kernel_mass);
            let (h, dh) = if model == BuiltinModel::ZeroObservation {
                zero_obs()
            } else {
                rational_obs(p.h0)
            };
            let depends_y = model != BuiltinModel::NoMeanfield;
            let sigma: super::CoeffFn = if depends_y {
                tanh_sigma.clone()
            } else {
                Arc::new(move |_t, a: f64, _y, z: f64| {
                    s0 * (0.4 + 0.2 * (a.tanh() + z.tanh()))
                })
            };
            let dsigma_dy: super::CoeffFn = if depends_y {
                sig_dy.clone()
            } else {
                zero4.clone()
            };
            CoefficientSet {
                sigma,
                dsigma_da: sig_da.clone(),
                dsigma_dy,
                dsigma_dz: sig_dz.clone(),
                h,
                dh_dx: dh,
                f: bounded_f,
                df_da: bounded_f_da,
                df_dy: zero4.clone(),
                df_dz: bounded_f_dz,
                phi: bounded_phi,
                dphi_dx: bounded_phi_dx,
                dphi_dy: bounded_phi_dy,
                kernel_sigma: kernel.clone(),
                kernel_f: kernel,
                control,
                x0: p.x0,
                sigma_depends_y: depends_y,
                f_depends_y: false,
                phi_depends_y: true,
            }
        }
        BuiltinModel::LinearGaussian => {
            let c = p.c;
            let kernel = identity_kernel();
            CoefficientSet {
                sigma: Arc::new(move |_t, _a, _y, _z| s0),
                dsigma_da: zero4.clone(),
                dsigma_dy: zero4.clone(),
                dsigma_dz: zero4.clone(),
                h: Arc::new(move |_t, x: f64| c * x),
                dh_dx: Arc::new(move |_t, _x| c),
                f: Arc::new(move |_t, _a, _y, z: f64| rho * z * z),
                df_da: zero4.clone(),
                df_dy: zero4.clone(),
                df_dz: bounded_f_dz,
                phi: Arc::new(|x: f64, y: f64| (x - y) * (x - y)),
                dphi_dx: Arc::new(|x: f64, y: f64| 2.0 * (x - y)),
                dphi_dy: Arc::new(|x: f64, y: f64| -2.0 * (x - y)),
                kernel_sigma: kernel.clone(),
                kernel_f: kernel,
                control,
                x0: p.x0,
                sigma_depends_y: false,
                f_depends_y: false,
                phi_depends_y: true,
            }
        }
        BuiltinModel::SeparableCost => {
            let kernel = memory_kernel(p.kernel_mass);
            let (h, dh) = rational_obs(p.h0);
            CoefficientSet {
                sigma: Arc::new(move |_t, a: f64, y: f64, _z| {
                    s0 * (0.4 + 0.2 * (a.tanh() + y.tanh()))
                }),
                dsigma_da: sig_da.clone(),
                dsigma_dy: sig_dy.clone(),
                dsigma_dz: zero4.clone(),
                h,
                dh_dx: dh,
                f: Arc::new(move |_t, _a, _y, z: f64| (z - zstar) * (z - zstar)),
                df_da: zero4.clone(),
                df_dy: zero4.clone(),
                df_dz: Arc::new(move |_t, _a, _y, z: f64| 2.0 * (z - zstar)),
                phi: Arc::new(|_x, _y| 0.0),
                dphi_dx: Arc::new(|_x, _y| 0.0),
                dphi_dy: Arc::new(|_x, _y| 0.0),
                kernel_sigma: kernel.clone(),
                kernel_f: kernel,
                control,
                x0: p.x0,
                sigma_depends_y: true,
                f_depends_y: false,
                phi_depends_y: false,
            }
        }
    };
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Channel, RngStream};

    #[test]
    fn zero_observation_has_zero_drift() {
        let m = builtin_model(BuiltinModel::ZeroObservation, &ModelParams::default()).unwrap();
        assert_eq!((m.h)(0.3, 5.0), 0.0);
        assert_eq!((m.dh_dx)(0.3, 5.0), 0.0);
    }

    #[test]
    fn linear_gaussian_observation_is_linear() {
        let m = builtin_model(BuiltinModel::LinearGaussian, &ModelParams::default()).unwrap();
        assert_eq!((m.h)(0.0, 2.0), 2.0);
        // default rho = 0 keeps the running cost identically zero
        assert_eq!((m.f)(0.5, 1.0, 2.0, 0.7), 0.0);
    }

    #[test]
    fn bounded_sigmoid_diffusion_is_bounded() {
        let p = ModelParams {
            sigma0: 0.7,
            ..ModelParams::default()
        };
        let m = builtin_model(BuiltinModel::BoundedSigmoid, &p).unwrap();
        let s = RngStream::new(3);
        for j in 0..100_000 {
            let a = 20.0 * (s.uniform(j, 0, 0, Channel::Probe) - 0.5);
            let y = 20.0 * (s.uniform(j, 1, 0, Channel::Probe) - 0.5);
            let z = 20.0 * (s.uniform(j, 2, 0, Channel::Probe) - 0.5);
            assert!((m.sigma)(0.1, a, y, z).abs() <= p.sigma0);
        }
    }

    #[test]
    fn no_meanfield_ignores_y() {
        let m = builtin_model(BuiltinModel::NoMeanfield, &ModelParams::default()).unwrap();
        let s = RngStream::new(4);
        for j in 0..1000 {
            let a = 6.0 * (s.uniform(j, 0, 0, Channel::Probe) - 0.5);
            let z = s.uniform(j, 1, 0, Channel::Probe);
            let v1 = (m.sigma)(0.2, a, -3.0, z);
            let v2 = (m.sigma)(0.2, a, 7.5, z);
            assert_eq!(v1, v2);
        }
        assert!(!m.sigma_depends_y);
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(BuiltinModel::from_name("gaussian").is_err());
        assert!(BuiltinModel::from_name("bounded_sigmoid").is_ok());
    }

    #[test]
    fn memory_kernel_mass_respects_declared_bound() {
        use crate::grid::TimeGrid;
        let m = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        for (k, mass) in m.kernel_sigma.grid_mass(&grid).iter().enumerate() {
            assert!(
                *mass <= m.kernel_sigma.mass_bound() + 1e-12,
                "node {k}: mass {mass} exceeds bound"
            );
        }
    }
}
