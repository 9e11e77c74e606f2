//! Command implementations. Every command writes a manifest before any
//! computation output, then its CSV/JSON artifacts with deterministic bytes.

use crate::config::RunConfig;
use crate::csvio::{CsvField, CsvWriter};
use crate::manifest::RunManifest;
use anyhow::Context;
use cmf_core::adjoint::{optimize, BasisSpec, OptimizerParams};
use cmf_core::fixed_point::{picard_iterate, FpSettings};
use cmf_core::kalman::kalman_bucy;
use cmf_core::law::MarginalLawFlow;
use cmf_core::model::{builtin_model, BuiltinModel, CoefficientSet, ModelParams};
use cmf_core::policy::ControlPolicy;
use cmf_core::rng::RngStream;
use cmf_core::sim::{simulate, SimOptions};
use cmf_core::suites::{duality_suite, filter_suite, stability_suite, variational_suite};
use cmf_core::TimeGrid;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct RunContext {
    pub cfg: RunConfig,
    pub model: BuiltinModel,
    pub coeffs: CoefficientSet,
    pub grid: TimeGrid,
    pub policy: ControlPolicy,
    pub stream: RngStream,
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    started: Instant,
}

impl RunContext {
    pub fn new(
        cfg: RunConfig,
        config_text: &str,
        command: &str,
        out_override: Option<String>,
        seed_override: Option<u64>,
        threads: usize,
    ) -> anyhow::Result<Self> {
        let mut cfg = cfg;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        let out_dir = PathBuf::from(out_override.unwrap_or_else(|| cfg.output_dir.clone()));
        let model = BuiltinModel::from_name(&cfg.model.name)?;
        let params = ModelParams {
            sigma0: cfg.model.sigma0,
            h0: cfg.model.h0,
            c: cfg.model.c,
            rho: cfg.model.rho,
            zstar: cfg.model.zstar,
            kernel_mass: cfg.model.kernel_mass,
            u_min: cfg.model.u_min,
            u_max: cfg.model.u_max,
            x0: cfg.model.x0,
        };
        let coeffs = builtin_model(model, &params)?;
        let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.steps)?;
        let policy = ControlPolicy::linear(
            cfg.policy.theta.clone(),
            cfg.policy.ewa_rate,
            coeffs.control,
        )?;
        let stream = RngStream::new(cfg.seed);
        let mut manifest = RunManifest::new(
            crate::config::config_hash(config_text),
            cfg.seed,
            command,
            threads,
        );
        // manifest lands on disk before any computation output
        manifest.write(&out_dir)?;
        Ok(Self {
            cfg,
            model,
            coeffs,
            grid,
            policy,
            stream,
            out_dir,
            manifest,
            started: Instant::now(),
        })
    }

    pub fn fp_settings(&self) -> FpSettings {
        FpSettings {
            damping: self.cfg.fixed_point.damping,
            tol: self.cfg.fixed_point.tol,
            max_iter: self.cfg.fixed_point.max_iter,
        }
    }

    pub fn finalize(mut self) -> anyhow::Result<()> {
        self.manifest.wallclock_s = Some(self.started.elapsed().as_secs_f64());
        self.manifest.write(&self.out_dir)?;
        Ok(())
    }

    fn out_path(&mut self, name: &str) -> PathBuf {
        let p = self.out_dir.join(name);
        self.manifest.record(&p);
        p
    }
}

/// Simulate at the point-mass input flow and dump the scenario statistics
/// (plus the Kalman oracle columns for the linear-Gaussian model and the
/// per-particle file when requested).
pub fn cmd_simulate(ctx: &mut RunContext) -> anyhow::Result<()> {
    let opts = SimOptions {
        store_paths: ctx.cfg.ensemble.dump_particles,
        resample: ctx.cfg.ensemble.resample,
    };
    let flow = MarginalLawFlow::dirac(&ctx.grid, ctx.coeffs.x0);
    let ensemble = simulate(
        &ctx.coeffs,
        &ctx.policy,
        &flow,
        &ctx.grid,
        ctx.cfg.ensemble.scenarios,
        ctx.cfg.ensemble.particles,
        &ctx.stream,
        &opts,
    )?;

    let kalman = if ctx.model == BuiltinModel::LinearGaussian {
        let mut per_scenario = Vec::with_capacity(ensemble.scenarios);
        for m in 0..ensemble.scenarios {
            let y: Vec<f64> = ensemble.y.row(m).to_vec();
            let (mean, _) = kalman_bucy(&ctx.grid, &y, ctx.cfg.model.c, ctx.cfg.model.sigma0, ctx.coeffs.x0);
            per_scenario.push(mean);
        }
        Some(per_scenario)
    } else {
        None
    };

    let mut header = vec!["scenario", "step", "time", "Y", "U", "S", "S0", "ess"];
    if kalman.is_some() {
        header.push("kalman");
        header.push("kalman_error");
    }
    let path = ctx.out_path("scenario.csv");
    let mut w = CsvWriter::create(&path, &header)?;
    for m in 0..ensemble.scenarios {
        for k in 0..=ctx.grid.steps() {
            let mut row = vec![
                CsvField::Int(m as i64),
                CsvField::Int(k as i64),
                CsvField::Float(ctx.grid.time(k)),
                CsvField::Float(ensemble.y[(m, k)]),
                CsvField::Float(ensemble.u[(m, k)]),
                CsvField::Float(ensemble.s[(m, k)]),
                CsvField::Float(ensemble.s0[(m, k)]),
                CsvField::Float(ensemble.ess[(m, k)]),
            ];
            if let Some(kal) = &kalman {
                row.push(CsvField::Float(kal[m][k]));
                row.push(CsvField::Float((ensemble.u[(m, k)] - kal[m][k]).abs()));
            }
            w.row(&row)?;
        }
    }
    w.finish()?;

    if ctx.cfg.ensemble.dump_particles {
        let paths = ensemble.paths()?;
        let p = ctx.out_path("particles.csv");
        let mut w = CsvWriter::create(&p, &["scenario", "particle", "step", "time", "X", "logL"])?;
        for m in 0..ensemble.scenarios {
            for i in 0..ensemble.particles {
                let row_idx = ensemble.path_index(m, i);
                for k in 0..=ctx.grid.steps() {
                    w.row(&[
                        CsvField::Int(m as i64),
                        CsvField::Int(i as i64),
                        CsvField::Int(k as i64),
                        CsvField::Float(ctx.grid.time(k)),
                        CsvField::Float(paths.x[(row_idx, k)]),
                        CsvField::Float(paths.logl[(row_idx, k)]),
                    ])?;
                }
            }
        }
        w.finish()?;
    }
    Ok(())
}

/// Picard iteration dump: per-iteration distances and the final flow.
/// Returns false when the iteration did not converge (exit code 4).
pub fn cmd_fixpoint(ctx: &mut RunContext) -> anyhow::Result<bool> {
    let fp = ctx.fp_settings();
    let report = picard_iterate(
        &ctx.coeffs,
        &ctx.policy,
        MarginalLawFlow::dirac(&ctx.grid, ctx.coeffs.x0),
        &ctx.grid,
        ctx.cfg.ensemble.scenarios,
        ctx.cfg.ensemble.particles,
        &ctx.stream,
        fp.damping,
        fp.tol,
        fp.max_iter,
    )?;

    let path = ctx.out_path("fixpoint_iters.csv");
    let mut w = CsvWriter::create(&path, &["iteration", "d_k", "residual", "fourth_moment_max"])?;
    for (j, d) in report.distances.iter().enumerate() {
        w.row(&[
            CsvField::Int(j as i64 + 1),
            CsvField::Float(*d),
            CsvField::Float(report.residuals[j]),
            CsvField::Float(report.fourth_moments[j]),
        ])?;
    }
    w.finish()?;

    let path = ctx.out_path("flow.csv");
    let mut w = CsvWriter::create(&path, &["step", "time", "rank", "value", "weight"])?;
    for k in 0..=ctx.grid.steps() {
        let law = report.flow.law(k);
        for (rank, &v) in law.samples().iter().enumerate() {
            w.row(&[
                CsvField::Int(k as i64),
                CsvField::Float(ctx.grid.time(k)),
                CsvField::Int(rank as i64),
                CsvField::Float(v),
                CsvField::Float(law.weight(rank)),
            ])?;
        }
    }
    w.finish()?;

    let summary = json!({
        "converged": report.converged,
        "iterations": report.iterations,
        "residual": report.residual,
        "fourth_moment_sup": report.fourth_moment_sup,
        "pathspace_w2": report.pathspace_w2,
    });
    let path = ctx.out_path("fixpoint_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(report.converged)
}

/// Projected-gradient optimization; writes the trace and the final policy.
pub fn cmd_optimize(ctx: &mut RunContext) -> anyhow::Result<()> {
    let params = OptimizerParams {
        step: ctx.cfg.optimizer.step,
        tol: ctx.cfg.optimizer.tol,
        max_iter: ctx.cfg.optimizer.max_iter,
        basis: BasisSpec::parse(&ctx.cfg.optimizer.basis)?,
        armijo_c: ctx.cfg.optimizer.armijo_c,
        max_halvings: ctx.cfg.optimizer.max_halvings,
        fp: ctx.fp_settings(),
        measure: ctx.cfg.cost_measure,
    };
    let outcome = optimize(
        &ctx.coeffs,
        &ctx.policy,
        &ctx.grid,
        ctx.cfg.ensemble.scenarios,
        ctx.cfg.ensemble.particles,
        &ctx.stream,
        &params,
    )?;

    let path = ctx.out_path("trace.csv");
    let mut w = CsvWriter::create(
        &path,
        &[
            "iteration",
            "J",
            "J_stderr",
            "grad_norm",
            "step",
            "duality_defect",
            "fixpoint_residual",
            "step_failed",
        ],
    )?;
    for row in &outcome.trace {
        w.row(&[
            CsvField::Int(row.iteration as i64),
            CsvField::Float(row.j),
            CsvField::Float(row.j_stderr),
            CsvField::Float(row.grad_norm),
            CsvField::Float(row.step),
            match row.duality_defect {
                Some(d) => CsvField::Float(d),
                None => CsvField::Empty,
            },
            CsvField::Float(row.fixpoint_residual),
            CsvField::Int(row.step_failed as i64),
        ])?;
    }
    w.finish()?;

    let path = ctx.out_path("policy.json");
    std::fs::write(&path, serde_json::to_string_pretty(&outcome.policy)? + "\n")?;
    Ok(())
}

fn write_report(ctx: &mut RunContext, value: &serde_json::Value) -> anyhow::Result<PathBuf> {
    let path = ctx.out_path("validate_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path)
}

/// Validation suites; returns the list of failed assertions (exit 5 when
/// nonempty), with the failing metrics serialized in the report.
pub fn cmd_validate(ctx: &mut RunContext) -> anyhow::Result<Vec<String>> {
    let vcfg = ctx
        .cfg
        .validate
        .clone()
        .context("validate requires a 'validate' config section")?;
    let toward = ControlPolicy::linear(
        vcfg.toward_theta.clone(),
        ctx.cfg.policy.ewa_rate,
        ctx.coeffs.control,
    )?;
    let fp = ctx.fp_settings();
    let m = ctx.cfg.ensemble.scenarios;
    let n = ctx.cfg.ensemble.particles;
    let mut failures = Vec::new();

    match vcfg.suite.as_str() {
        "stability" => {
            let report = stability_suite(
                &ctx.coeffs,
                &ctx.policy,
                &toward,
                &vcfg.deltas,
                &ctx.grid,
                m,
                n,
                &ctx.stream,
                &fp,
            )?;
            if report.slope < 0.9 {
                failures.push(format!("stability slope {:.4} < 0.9", report.slope));
            }
            if !report.intercept.is_finite() || report.intercept.abs() > 50.0 {
                failures.push(format!("stability intercept {} unbounded", report.intercept));
            }
            let path = ctx.out_path("stability.csv");
            let mut w = CsvWriter::create(&path, &["log_norm2", "log_dist2"])?;
            for (x, y) in &report.points {
                w.row(&[CsvField::Float(*x), CsvField::Float(*y)])?;
            }
            w.finish()?;
            write_report(
                ctx,
                &json!({
                    "suite": "stability",
                    "slope": report.slope,
                    "intercept": report.intercept,
                    "failures": failures,
                }),
            )?;
        }
        "variational" => {
            let report = variational_suite(
                &ctx.coeffs,
                &ctx.policy,
                &toward,
                &vcfg.thetas,
                &ctx.grid,
                m,
                n,
                &ctx.stream,
                &fp,
            )?;
            for w in report.e_table.windows(2) {
                if w[1].1 >= w[0].1 {
                    failures.push(format!(
                        "e({}) = {:.4e} did not decrease from e({}) = {:.4e}",
                        w[1].0, w[1].1, w[0].0, w[0].1
                    ));
                }
            }
            if report.e_table.len() >= 2 {
                let first = report.e_table.first().unwrap();
                let half_idx = report
                    .e_table
                    .iter()
                    .position(|(t, _)| *t <= first.0 / 2.0 + 1e-12);
                if let Some(idx) = half_idx {
                    let (t_half, e_half) = report.e_table[idx];
                    if e_half / first.1 > 0.7 {
                        failures.push(format!(
                            "e({t_half})/e({}) = {:.3} > 0.7",
                            first.0,
                            e_half / first.1
                        ));
                    }
                }
            }
            let path = ctx.out_path("variational.csv");
            let mut w = CsvWriter::create(&path, &["theta", "e", "du_sup"])?;
            for ((t, e), (_, du)) in report.e_table.iter().zip(&report.du_table) {
                w.row(&[
                    CsvField::Float(*t),
                    CsvField::Float(*e),
                    CsvField::Float(*du),
                ])?;
            }
            w.finish()?;
            write_report(
                ctx,
                &json!({
                    "suite": "variational",
                    "e_table": report.e_table,
                    "du_table": report.du_table,
                    "failures": failures,
                }),
            )?;
        }
        "duality" => {
            let report = duality_suite(
                &ctx.coeffs,
                &ctx.policy,
                &toward,
                &vcfg.thetas,
                &ctx.grid,
                m,
                n,
                &ctx.stream,
                &fp,
                ctx.cfg.cost_measure,
            )?;
            if report.defect > 0.05 {
                failures.push(format!(
                    "duality defect {:.4} > 0.05 (lhs {:.6e}, fd {:.6e})",
                    report.defect, report.lhs, report.fd
                ));
            }
            write_report(
                ctx,
                &json!({
                    "suite": "duality",
                    "pairing": report.pairing,
                    "f_terms": report.f_terms,
                    "lhs": report.lhs,
                    "fd": report.fd,
                    "defect": report.defect,
                    "j_base": report.j_base,
                    "j_at": report.j_at,
                    "failures": failures,
                }),
            )?;
        }
        "filter" => {
            let kalman = if ctx.model == BuiltinModel::LinearGaussian {
                Some((ctx.cfg.model.c, ctx.cfg.model.sigma0))
            } else {
                None
            };
            let report = filter_suite(
                &ctx.coeffs,
                &ctx.policy,
                &ctx.grid,
                m,
                n,
                &ctx.stream,
                &fp,
                kalman,
            )?;
            if report.martingale_deviation > 3.0 * report.martingale_se {
                failures.push(format!(
                    "martingale deviation {:.4e} > 3 x {:.4e}",
                    report.martingale_deviation, report.martingale_se
                ));
            }
            if let Some(err) = report.kalman_time_avg_error {
                let bound = 0.05 * ctx.cfg.model.sigma0;
                if err > bound {
                    failures.push(format!("kalman error {err:.4e} > {bound:.4e}"));
                }
            }
            write_report(
                ctx,
                &json!({
                    "suite": "filter",
                    "martingale_deviation": report.martingale_deviation,
                    "martingale_se": report.martingale_se,
                    "zakai_mean_defect": report.zakai_mean_defect,
                    "zakai_max_defect": report.zakai_max_defect,
                    "fkk_sup_distance": report.fkk_sup_distance,
                    "kalman_time_avg_error": report.kalman_time_avg_error,
                    "failures": failures,
                }),
            )?;
        }
        other => anyhow::bail!("unknown validation suite '{other}'"),
    }
    Ok(failures)
}
