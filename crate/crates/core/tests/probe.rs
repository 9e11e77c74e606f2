// Temporary experiment harness; run with
//   cargo test -p cmf-core --test probe -- --ignored --nocapture

use cmf_core::adjoint::CostMeasure;
use cmf_core::fixed_point::{picard_iterate, FpSettings};
use cmf_core::law::MarginalLawFlow;
use cmf_core::model::{builtin_model, BuiltinModel, ModelParams};
use cmf_core::policy::ControlPolicy;
use cmf_core::rng::RngStream;
use cmf_core::sim::{simulate, zakai_consistency, SimOptions};
use cmf_core::suites::{duality_suite, filter_suite, variational_suite};
use cmf_core::TimeGrid;
use std::time::Instant;

#[test]
#[ignore]
fn probe_kalman() {
    let t0 = Instant::now();
    let p = ModelParams {
        sigma0: 1.0,
        c: 1.0,
        x0: 1.0,
        ..ModelParams::default()
    };
    let c = builtin_model(BuiltinModel::LinearGaussian, &p).unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let policy = ControlPolicy::constant(0.0, c.control);
    let report = filter_suite(
        &c,
        &policy,
        &grid,
        32,
        10_000,
        &RngStream::new(42),
        &FpSettings::default(),
        Some((1.0, 1.0)),
    )
    .unwrap();
    println!(
        "kalman worst time-avg error = {:?}, martingale dev {} (se {}), elapsed {:?}",
        report.kalman_time_avg_error,
        report.martingale_deviation,
        report.martingale_se,
        t0.elapsed()
    );
}

#[test]
#[ignore]
fn probe_picard_crit4() {
    let t0 = Instant::now();
    let p = ModelParams {
        sigma0: 0.5,
        h0: 1.0,
        x0: 1.0,
        ..ModelParams::default()
    };
    let c = builtin_model(BuiltinModel::BoundedSigmoid, &p).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let policy = ControlPolicy::constant(0.1, c.control);
    let report = picard_iterate(
        &c,
        &policy,
        MarginalLawFlow::dirac(&grid, 1.0),
        &grid,
        64,
        2000,
        &RngStream::new(7),
        1.0,
        1e-2,
        20,
    )
    .unwrap();
    println!(
        "picard: converged={} iters={} residual={:.3e} distances={:?} m4={:.3} pathspace={:?} elapsed {:?}",
        report.converged,
        report.iterations,
        report.residual,
        report.distances,
        report.fourth_moment_sup,
        report.pathspace_w2,
        t0.elapsed()
    );
}

#[test]
#[ignore]
fn probe_variational() {
    let t0 = Instant::now();
    let p = ModelParams {
        sigma0: 0.5,
        h0: 1.0,
        ..ModelParams::default()
    };
    let c = builtin_model(BuiltinModel::BoundedSigmoid, &p).unwrap();
    let grid = TimeGrid::new(1.0, 80).unwrap();
    let u = ControlPolicy::constant(0.1, c.control);
    let v = ControlPolicy::constant(0.6, c.control);
    let report = variational_suite(
        &c,
        &u,
        &v,
        &[0.2, 0.1, 0.05],
        &grid,
        48,
        1000,
        &RngStream::new(11),
        &FpSettings::default(),
    )
    .unwrap();
    println!(
        "variational: e={:?} du={:?} elapsed {:?}",
        report.e_table,
        report.du_table,
        t0.elapsed()
    );
}

#[test]
#[ignore]
fn probe_duality() {
    let t0 = Instant::now();
    let p = ModelParams {
        sigma0: 0.5,
        h0: 1.0,
        rho: 0.3,
        x0: 0.5,
        ..ModelParams::default()
    };
    let c = builtin_model(BuiltinModel::BoundedSigmoid, &p).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let u = ControlPolicy::constant(-0.4, c.control);
    let v = ControlPolicy::constant(0.6, c.control);
    let report = duality_suite(
        &c,
        &u,
        &v,
        &[0.2, 0.1, 0.05, 0.025],
        &grid,
        64,
        2000,
        &RngStream::new(13),
        &FpSettings::default(),
        CostMeasure::Q0,
    )
    .unwrap();
    println!(
        "duality: pairing={:.5e} f_terms={:.5e} lhs={:.5e} fd={:.5e} defect={:.4} j_base={:.5} j_at={:?} elapsed {:?}",
        report.pairing,
        report.f_terms,
        report.lhs,
        report.fd,
        report.defect,
        report.j_base,
        report.j_at,
        t0.elapsed()
    );
}

#[test]
#[ignore]
fn probe_zakai_halving() {
    let t0 = Instant::now();
    for (h0, sigma0) in [(1.0, 0.5), (2.0, 1.0), (1.0, 1.0)] {
        let p = ModelParams {
            sigma0,
            h0,
            ..ModelParams::default()
        };
        let c = builtin_model(BuiltinModel::BoundedSigmoid, &p).unwrap();
        let defect_at = |steps: usize| {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let policy = ControlPolicy::constant(0.1, c.control);
            let mut total = 0.0;
            let mut count = 0usize;
            for seed in 0..5u64 {
                let ens = simulate(
                    &c,
                    &policy,
                    &MarginalLawFlow::dirac(&grid, 1.0),
                    &grid,
                    32,
                    1000,
                    &RngStream::new(1000 + seed),
                    &SimOptions::default(),
                )
                .unwrap();
                for d in zakai_consistency(&ens, &c) {
                    total += d;
                    count += 1;
                }
            }
            total / count as f64
        };
        for (na, nb) in [(25usize, 50usize), (50, 100), (100, 200)] {
            let da = defect_at(na);
            let db = defect_at(nb);
            println!(
                "h0={h0} s0={sigma0}: defect({na})={da:.3e} defect({nb})={db:.3e} ratio={:.3}",
                db / da
            );
        }
    }
    println!("elapsed {:?}", t0.elapsed());
}
