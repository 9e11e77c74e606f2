//! Sampled checks of the standing assumptions and of declared derivatives.

use super::CoefficientSet;
use crate::error::{CmfError, Result};
use crate::rng::{Channel, RngStream};

/// Empirical sup of one quantity over two nested probe boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundEstimate {
    pub name: String,
    pub sup_small: f64,
    pub sup_large: f64,
    /// Heuristic: the sup keeps growing when the box expands.
    pub flagged_unbounded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub entries: Vec<BoundEstimate>,
    /// max over grid-free probe times of the kernel mass, against the bound.
    pub kernel_mass_sigma: f64,
    pub kernel_mass_f: f64,
    pub kernel_mass_bound: f64,
}

impl AssumptionReport {
    pub fn flagged(&self) -> Vec<&BoundEstimate> {
        self.entries.iter().filter(|e| e.flagged_unbounded).collect()
    }
}

const SMALL_BOX: f64 = 10.0;
const LARGE_BOX: f64 = 100.0;
const GROWTH_FACTOR: f64 = 3.0;

/// Probes every assumption-relevant quantity over expanding boxes and
/// reports empirical sups; never rejects.
pub fn validate_assumptions(
    c: &CoefficientSet,
    probes: usize,
    stream: &RngStream,
) -> Result<AssumptionReport> {
    if probes < 100 {
        return Err(CmfError::InvalidInput(format!(
            "need at least 100 probe points, got {probes}"
        )));
    }

    let quantities: Vec<(&str, Box<dyn Fn(f64, f64, f64, f64, f64) -> f64>)> = vec![
        ("sigma", Box::new(|t, a, y, z, _x| (c.sigma)(t, a, y, z))),
        ("h", Box::new(|t, _a, _y, _z, x| (c.h)(t, x))),
        ("f", Box::new(|t, a, y, z, _x| (c.f)(t, a, y, z))),
        ("phi", Box::new(|_t, _a, y, _z, x| (c.phi)(x, y))),
        (
            "y*dsigma_dy",
            Box::new(|t, a, y, z, _x| y * (c.dsigma_dy)(t, a, y, z)),
        ),
        ("x*dh_dx", Box::new(|t, _a, _y, _z, x| x * (c.dh_dx)(t, x))),
        ("x*h", Box::new(|t, _a, _y, _z, x| x * (c.h)(t, x))),
        (
            "x^2*dh_dx",
            Box::new(|t, _a, _y, _z, x| x * x * (c.dh_dx)(t, x)),
        ),
        ("dsigma_da", Box::new(|t, a, y, z, _x| (c.dsigma_da)(t, a, y, z))),
        ("dsigma_dy", Box::new(|t, a, y, z, _x| (c.dsigma_dy)(t, a, y, z))),
        ("dsigma_dz", Box::new(|t, a, y, z, _x| (c.dsigma_dz)(t, a, y, z))),
        ("dh_dx", Box::new(|t, _a, _y, _z, x| (c.dh_dx)(t, x))),
        ("df_da", Box::new(|t, a, y, z, _x| (c.df_da)(t, a, y, z))),
        ("df_dy", Box::new(|t, a, y, z, _x| (c.df_dy)(t, a, y, z))),
        ("df_dz", Box::new(|t, a, y, z, _x| (c.df_dz)(t, a, y, z))),
        ("dphi_dx", Box::new(|_t, _a, y, _z, x| (c.dphi_dx)(x, y))),
        ("dphi_dy", Box::new(|_t, _a, y, _z, x| (c.dphi_dy)(x, y))),
    ];

    let sup_over_box = |box_half: f64, q: &dyn Fn(f64, f64, f64, f64, f64) -> f64, tag: usize| {
        let mut sup: f64 = 0.0;
        for j in 0..probes {
            let u = |ch: usize| stream.uniform(j, ch, tag, Channel::Probe);
            let t = u(0);
            let a = box_half * (2.0 * u(1) - 1.0);
            let y = box_half * (2.0 * u(2) - 1.0);
            let x = box_half * (2.0 * u(3) - 1.0);
            let z = c.control.lo + (c.control.hi - c.control.lo) * u(4);
            sup = sup.max(q(t, a, y, z, x).abs());
        }
        sup
    };

    let mut entries = Vec::with_capacity(quantities.len());
    for (idx, (name, q)) in quantities.iter().enumerate() {
        let sup_small = sup_over_box(SMALL_BOX, q.as_ref(), 2 * idx);
        let sup_large = sup_over_box(LARGE_BOX, q.as_ref(), 2 * idx + 1);
        let flagged = sup_large > GROWTH_FACTOR * sup_small + 1e-6;
        entries.push(BoundEstimate {
            name: (*name).to_string(),
            sup_small,
            sup_large,
            flagged_unbounded: flagged,
        });
    }

    // Kernel masses evaluated on a reference grid over [0, 1].
    let grid = crate::grid::TimeGrid::new(1.0, 64).unwrap();
    let mass_sup = |k: &super::PathFeatureKernel| {
        k.grid_mass(&grid).into_iter().fold(0.0f64, f64::max)
    };
    Ok(AssumptionReport {
        kernel_mass_sigma: mass_sup(&c.kernel_sigma),
        kernel_mass_f: mass_sup(&c.kernel_f),
        kernel_mass_bound: c.kernel_sigma.mass_bound(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    /// Worst relative mismatch per derivative field.
    pub worst: Vec<(String, f64)>,
}

impl DerivativeReport {
    pub fn max_mismatch(&self) -> f64 {
        self.worst.iter().map(|(_, v)| *v).fold(0.0, f64::max)
    }
}

const FD_TOL: f64 = 1e-3;

fn central_diff<F: Fn(f64) -> f64>(g: F, x: f64) -> f64 {
    let step = 1e-4 * (1.0 + x.abs());
    (g(x + step) - g(x - step)) / (2.0 * step)
}

fn rel_mismatch(declared: f64, fd: f64) -> f64 {
    (declared - fd).abs() / f64::max(1.0, fd.abs().max(declared.abs()))
}

/// Compares every declared derivative against central finite differences on
/// random probe points; errors if any field exceeds 1e-3 relative mismatch.
pub fn check_derivatives(
    c: &CoefficientSet,
    probes: usize,
    stream: &RngStream,
) -> Result<DerivativeReport> {
    if probes < 100 {
        return Err(CmfError::InvalidInput(format!(
            "need at least 100 probe points, got {probes}"
        )));
    }
    let mut worst: Vec<(String, f64)> = [
        "dsigma_da",
        "dsigma_dy",
        "dsigma_dz",
        "dh_dx",
        "df_da",
        "df_dy",
        "df_dz",
        "dphi_dx",
        "dphi_dy",
    ]
    .iter()
    .map(|n| (n.to_string(), 0.0))
    .collect();

    for j in 0..probes {
        let u = |ch: usize| stream.uniform(j, ch, 0xD1F, Channel::Probe);
        let t = u(0);
        let a = 6.0 * (u(1) - 0.5);
        let y = 6.0 * (u(2) - 0.5);
        let x = 6.0 * (u(3) - 0.5);
        // keep z strictly inside so the two-sided stencil stays in the set
        let margin = 1e-3 * (c.control.hi - c.control.lo);
        let z = c.control.lo + margin + (c.control.hi - c.control.lo - 2.0 * margin) * u(4);

        let checks: [(usize, f64, f64); 9] = [
            (
                0,
                (c.dsigma_da)(t, a, y, z),
                central_diff(|v| (c.sigma)(t, v, y, z), a),
            ),
            (
                1,
                (c.dsigma_dy)(t, a, y, z),
                central_diff(|v| (c.sigma)(t, a, v, z), y),
            ),
            (
                2,
                (c.dsigma_dz)(t, a, y, z),
                central_diff(|v| (c.sigma)(t, a, y, v), z),
            ),
            (3, (c.dh_dx)(t, x), central_diff(|v| (c.h)(t, v), x)),
            (
                4,
                (c.df_da)(t, a, y, z),
                central_diff(|v| (c.f)(t, v, y, z), a),
            ),
            (
                5,
                (c.df_dy)(t, a, y, z),
                central_diff(|v| (c.f)(t, a, v, z), y),
            ),
            (
                6,
                (c.df_dz)(t, a, y, z),
                central_diff(|v| (c.f)(t, a, y, v), z),
            ),
            (7, (c.dphi_dx)(x, y), central_diff(|v| (c.phi)(v, y), x)),
            (8, (c.dphi_dy)(x, y), central_diff(|v| (c.phi)(x, v), y)),
        ];
        for (idx, declared, fd) in checks {
            let m = rel_mismatch(declared, fd);
            if m > worst[idx].1 {
                worst[idx].1 = m;
            }
        }
    }

    for (name, m) in &worst {
        if *m > FD_TOL {
            return Err(CmfError::DerivativeMismatch {
                field: name.clone(),
                mismatch: *m,
            });
        }
    }
    Ok(DerivativeReport { worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, BuiltinModel, ModelParams};
    use std::sync::Arc;

    fn stream() -> RngStream {
        RngStream::new(99)
    }

    #[test]
    fn builtin_models_pass_derivative_check() {
        for m in [
            BuiltinModel::BoundedSigmoid,
            BuiltinModel::LinearGaussian,
            BuiltinModel::NoMeanfield,
            BuiltinModel::ZeroObservation,
            BuiltinModel::SeparableCost,
        ] {
            let c = builtin_model(m, &ModelParams::default()).unwrap();
            let report = check_derivatives(&c, 300, &stream())
                .unwrap_or_else(|e| panic!("{}: {e}", m.name()));
            assert!(
                report.max_mismatch() < 1e-5,
                "{}: worst mismatch {:?}",
                m.name(),
                report.worst
            );
        }
    }

    #[test]
    fn exact_trig_derivative_is_tight() {
        let mut c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        c.sigma = Arc::new(|_t, _a, y: f64, _z| y.sin());
        c.dsigma_dy = Arc::new(|_t, _a, y: f64, _z| y.cos());
        c.dsigma_da = Arc::new(|_t, _a, _y, _z| 0.0);
        c.dsigma_dz = Arc::new(|_t, _a, _y, _z| 0.0);
        let report = check_derivatives(&c, 300, &stream()).unwrap();
        let dy = report
            .worst
            .iter()
            .find(|(n, _)| n == "dsigma_dy")
            .unwrap()
            .1;
        assert!(dy < 1e-6, "mismatch {dy}");
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let mut c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        c.sigma = Arc::new(|_t, _a, y: f64, _z| y.sin());
        c.dsigma_dy = Arc::new(|_t, _a, y: f64, _z| -y.cos());
        c.dsigma_da = Arc::new(|_t, _a, _y, _z| 0.0);
        c.dsigma_dz = Arc::new(|_t, _a, _y, _z| 0.0);
        match check_derivatives(&c, 300, &stream()) {
            Err(CmfError::DerivativeMismatch { field, .. }) => assert_eq!(field, "dsigma_dy"),
            other => panic!("expected mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn bounded_model_is_stable_across_boxes() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        let report = validate_assumptions(&c, 400, &stream()).unwrap();
        assert!(
            report.flagged().is_empty(),
            "unexpected flags: {:?}",
            report.flagged()
        );
        assert!(report.kernel_mass_sigma <= report.kernel_mass_bound + 1e-12);
    }

    #[test]
    fn linear_model_is_flagged_unbounded() {
        let c = builtin_model(BuiltinModel::LinearGaussian, &ModelParams::default()).unwrap();
        let report = validate_assumptions(&c, 400, &stream()).unwrap();
        let names: Vec<&str> = report
            .flagged()
            .iter()
            .map(|e| e.name.as_str())
            .collect();
        assert!(names.contains(&"x*h"), "flags: {names:?}");
    }

    #[test]
    fn trivial_model_has_unit_or_zero_bounds() {
        let base = builtin_model(BuiltinModel::ZeroObservation, &ModelParams::default()).unwrap();
        let c = CoefficientSet {
            sigma: Arc::new(|_t, _a, _y, _z| 1.0),
            dsigma_da: Arc::new(|_t, _a, _y, _z| 0.0),
            dsigma_dy: Arc::new(|_t, _a, _y, _z| 0.0),
            dsigma_dz: Arc::new(|_t, _a, _y, _z| 0.0),
            h: Arc::new(|_t, _x| 0.0),
            dh_dx: Arc::new(|_t, _x| 0.0),
            f: Arc::new(|_t, _a, _y, _z| 0.0),
            df_da: Arc::new(|_t, _a, _y, _z| 0.0),
            df_dy: Arc::new(|_t, _a, _y, _z| 0.0),
            df_dz: Arc::new(|_t, _a, _y, _z| 0.0),
            phi: Arc::new(|_x, _y| 0.0),
            dphi_dx: Arc::new(|_x, _y| 0.0),
            dphi_dy: Arc::new(|_x, _y| 0.0),
            sigma_depends_y: false,
            f_depends_y: false,
            phi_depends_y: false,
            ..base
        };
        let report = validate_assumptions(&c, 200, &stream()).unwrap();
        for e in &report.entries {
            assert!(
                e.sup_large == 0.0 || (e.sup_large - 1.0).abs() < 1e-12,
                "{}: sup {}",
                e.name,
                e.sup_large
            );
        }
        assert!(report.flagged().is_empty());
    }

    #[test]
    fn too_few_probes_rejected() {
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &ModelParams::default()).unwrap();
        assert!(validate_assumptions(&c, 50, &stream()).is_err());
        assert!(check_derivatives(&c, 50, &stream()).is_err());
    }
}
