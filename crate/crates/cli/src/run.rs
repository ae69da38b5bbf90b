//! Experiment runners: each writes `results.csv`, `summary.json` and plots.

use std::fs;
use std::path::Path;

use ifyot::cost_basis::{evaluate, symmetric_quadratic_features, CostBasis, Feature};
use ifyot::experiments::{
    best_of_curve, lowrank_certificate_sweep, r_limit, recovery_path, sample_sweep_cell, sparse_certificate_sweep,
    summarize_sample_sweep, CertificateRow, Model, RLimitConfig, RecoveryRow,
};
use ifyot::forward_uot::{dual_value, fixed_point_residual, primal_from_dual, primal_value, solve_sinkhorn, UotProblem};
use ifyot::fy_loss::FyIuotLoss;
use ifyot::gaussian_oracle::QuadraticPotentialTruth;
use ifyot::measures::{derive_seed, sample_gaussian, DiscreteMeasure, GaussianSpec};
use ifyot::solver::{solve_regularized, Penalty, RegularizedOptions};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::*;
use crate::error::CliError;
use crate::plot::{write_plot, PlotSpec, Series};

/// Runs one experiment into `out` and returns the summary.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    fs::create_dir_all(out)?;
    let mut summary = match cfg {
        ExperimentConfig::ForwardUot(c) => forward_uot(c, out)?,
        ExperimentConfig::Iuot(c) => iuot(c, out)?,
        ExperimentConfig::Ijko(c) => ijko(c, out)?,
        ExperimentConfig::CertificateSweep(c) => certificate_sweep(c, out)?,
        ExperimentConfig::SampleSweep(c) => sample_sweep(c, out)?,
        ExperimentConfig::SparseGraph(c) => recovery(c, Model::Sparse, out)?,
        ExperimentConfig::LowRank(c) => recovery(c, Model::LowRank, out)?,
    };
    summary["experiment"] = json!(cfg.name());
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

fn write_rows<T: Serialize>(out: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn plot(out: &Path, name: &str, series: &[Series], x: &str, y: &str, log_x: bool, log_y: bool) -> Result<(), CliError> {
    let spec = PlotSpec {
        x: x.into(),
        y: y.into(),
        group: None,
        log_x,
        log_y,
        title: None,
        output: out.join("plots").join(name),
    };
    write_plot(&spec.output, series, &spec)
}

fn load_measure(src: &MeasureSource, seed: u64) -> Result<DiscreteMeasure, CliError> {
    Ok(match src {
        MeasureSource::Csv { path, mass } => DiscreteMeasure::read_csv(path, *mass)?,
        MeasureSource::Gaussian { n, mean, std, mass } => {
            let d = mean.len();
            let spec = GaussianSpec::new(DVector::from_column_slice(mean), DMatrix::<f64>::identity(d, d) * (std * std))?;
            DiscreteMeasure::uniform(sample_gaussian(&spec, *n, seed)?, *mass)?
        }
    })
}

fn cost_basis(spec: &BasisSpec, dx: usize, dy: usize) -> Result<CostBasis, CliError> {
    Ok(match spec {
        BasisSpec::Bilinear => {
            let phis = (0..dy).flat_map(|j| (0..dx).map(move |i| Feature::Product { i, j })).collect();
            CostBasis::generic(Feature::SqDist { scale: 1.0 }, phis)?
        }
        BasisSpec::PotentialQuadratic { tau } => CostBasis::potential_plus_sq_dist(symmetric_quadratic_features(dx), *tau)?,
    })
}

fn status_str<T: Serialize>(s: &T) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

#[derive(Serialize)]
struct PlanRow {
    i: usize,
    j: usize,
    plan: f64,
}

fn forward_uot(c: &ForwardUotConfig, out: &Path) -> Result<Value, CliError> {
    let alpha = load_measure(&c.alpha, derive_seed(c.seed, 0))?;
    let beta = load_measure(&c.beta, derive_seed(c.seed, 1))?;
    let mats = evaluate(&cost_basis(&c.basis, alpha.dim(), beta.dim())?, &alpha, &beta)?;
    if c.theta.len() != mats.s() {
        return Err(CliError::Config(format!("theta has {} entries, the basis {}", c.theta.len(), mats.s())));
    }
    let prob = UotProblem::new(alpha, beta, mats.cost(&DVector::from_column_slice(&c.theta)), c.eta, c.div1, c.div2)?;
    let pots = solve_sinkhorn(&prob, c.tol, c.max_iter, None)?;
    let coupling = primal_from_dual(&prob, &pots);
    let rows: Vec<PlanRow> = (0..coupling.plan.ncols())
        .flat_map(|j| (0..coupling.plan.nrows()).map(move |i| (i, j)))
        .map(|(i, j)| PlanRow {
            i,
            j,
            plan: coupling.plan[(i, j)],
        })
        .collect();
    write_rows(out, &rows)?;
    let primal = primal_value(&prob, &coupling.plan);
    let dual = dual_value(&prob, &pots);
    Ok(json!({
        "mass": coupling.mass,
        "primal": primal,
        "dual": dual,
        "gap": (primal - dual).abs(),
        "residual": fixed_point_residual(&prob, &pots),
    }))
}

#[derive(Serialize)]
struct LambdaRow {
    lambda: f64,
    objective: f64,
    error: f64,
    support_size: usize,
    status: String,
    iterations: usize,
}

fn iuot(c: &IuotConfig, out: &Path) -> Result<Value, CliError> {
    let alpha = load_measure(&c.alpha, derive_seed(c.seed, 0))?;
    let beta = load_measure(&c.beta, derive_seed(c.seed, 1))?;
    let (dx, dy) = (alpha.dim(), beta.dim());
    let mats = evaluate(&cost_basis(&c.basis, dx, dy)?, &alpha, &beta)?;
    if c.theta_star.len() != mats.s() {
        return Err(CliError::Config(format!("theta_star has {} entries, the basis {}", c.theta_star.len(), mats.s())));
    }
    let star = DVector::from_column_slice(&c.theta_star);
    let prob = UotProblem::new(alpha.clone(), beta.clone(), mats.cost(&star), c.eta, c.div1, c.div2)?;
    let plan = primal_from_dual(&prob, &solve_sinkhorn(&prob, 1e-12, 1_000_000, None)?).plan;
    let mut loss = FyIuotLoss::from_matrices(alpha, beta, plan, mats, c.eta, c.div1, c.div2)?.with_sharpening(c.r)?;
    let base = match (c.penalty, &c.basis) {
        (PenaltyKind::None, _) => Penalty::None,
        (PenaltyKind::L1, _) => Penalty::L1 { lambda: 0.0 },
        (PenaltyKind::NonnegL1, _) => Penalty::NonnegL1 { lambda: 0.0 },
        (PenaltyKind::Nuclear, BasisSpec::Bilinear) => Penalty::Nuclear {
            lambda: 0.0,
            rows: dx,
            cols: dy,
        },
        (PenaltyKind::Nuclear, _) => return Err(CliError::Config("the nuclear penalty needs the bilinear basis".into())),
    };
    let mut lambdas = if c.penalty == PenaltyKind::None { vec![0.0] } else { c.lambdas.values()? };
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let opts = RegularizedOptions {
        lbfgs: c.lbfgs,
        seed: c.seed,
        init_scale: 1e-2,
    };
    let mut rows = Vec::new();
    let mut thetas = Vec::new();
    let mut warm: Option<DVector<f64>> = None;
    let empty = DVector::zeros(0);
    for &lambda in &lambdas {
        let res = solve_regularized(&mut loss, base.with_lambda(lambda), warm.as_ref().map(|t| (t, &empty)), &opts)?;
        rows.push(LambdaRow {
            lambda,
            objective: res.objective,
            error: (&res.theta - &star).norm(),
            support_size: res.theta.iter().filter(|v| v.abs() > c.support_tol).count(),
            status: status_str(&res.status),
            iterations: res.iterations,
        });
        thetas.push(res.theta.clone());
        warm = Some(res.theta);
    }
    write_rows(out, &rows)?;
    let curve: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.error)).collect();
    let best = best_of_curve(&curve);
    let k = rows.iter().position(|r| r.lambda == best.best_lambda).unwrap_or(0);
    if lambdas.len() > 1 {
        let s = [Series {
            label: "error".into(),
            points: curve.clone(),
        }];
        plot(out, "error_vs_lambda.svg", &s, "lambda", "error", true, true)?;
    }
    Ok(json!({
        "best_lambda": best.best_lambda,
        "best_error": best.best_metric,
        "theta_hat": thetas[k].as_slice(),
        "theta_star": c.theta_star,
    }))
}

fn ijko(c: &IjkoConfig, out: &Path) -> Result<Value, CliError> {
    let truth = QuadraticPotentialTruth::new(
        matrix(&c.theta_star, "theta_star")?,
        DVector::from_column_slice(&c.m0),
        matrix(&c.sigma0, "sigma0")?,
    )?;
    let mut rs = c.rs.clone();
    rs.sort_by(f64::total_cmp);
    let res = r_limit(&RLimitConfig {
        truth,
        tau: c.tau,
        eta: c.eta,
        nodes: c.nodes,
        rs,
        theta: matrix(&c.theta, "theta")?,
    })?;
    write_rows(out, &res.rows)?;
    let errs: Vec<f64> = res.rows.iter().map(|r| r.error_vs_sample_limit).collect();
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let last = res.rows.last().map(|r| r.rel_error_vs_closed_form).unwrap_or(f64::NAN);
    let s = [
        Series {
            label: "r F_r".into(),
            points: res.rows.iter().map(|r| (r.r, r.scaled_gap)).collect(),
        },
        Series {
            label: "variance limit".into(),
            points: res.rows.iter().map(|r| (r.r, res.closed_form_limit)).collect(),
        },
    ];
    plot(out, "r_limit.svg", &s, "r", "scaled gap", true, false)?;
    Ok(json!({
        "sample_limit": res.sample_limit,
        "closed_form_limit": res.closed_form_limit,
        "fit_residual": res.fit_residual,
        "error_decreasing": monotone,
        "final_rel_error": last,
        "pass": monotone && last <= c.rel_tol,
    }))
}

fn certificate_sweep(c: &CertificateSweepConfig, out: &Path) -> Result<Value, CliError> {
    let mut rows: Vec<CertificateRow> = Vec::new();
    match c.setting {
        Model::Sparse => rows.extend(sparse_certificate_sweep(c.d, c.mean, &c.parameters, &c.steps, c.tau, c.loss)?),
        Model::LowRank => {
            for &t in &c.steps {
                rows.extend(lowrank_certificate_sweep(c.d, &c.parameters, t, c.tau, c.delta, c.loss)?);
            }
        }
    }
    write_rows(out, &rows)?;
    let series: Vec<Series> = c
        .steps
        .iter()
        .map(|&t| Series {
            label: format!("T={t}"),
            points: rows.iter().filter(|r| r.steps == t).map(|r| (r.parameter, r.z_max)).collect(),
        })
        .collect();
    let x = if c.setting == Model::Sparse { "sigma" } else { "omega" };
    plot(out, "z_max.svg", &series, x, "z_max", false, false)?;
    let cells: Vec<Value> = rows
        .iter()
        .map(|r| json!({"steps": r.steps, "parameter": r.parameter, "z_max": r.z_max, "nondegenerate": r.margin > 0.0}))
        .collect();
    Ok(json!({ "cells": cells }))
}

fn sample_sweep(c: &SampleSweepRun, out: &Path) -> Result<Value, CliError> {
    let core = c.core();
    let pop = core.population()?;
    let cells: Vec<(usize, usize)> = c.ns.iter().flat_map(|&n| (0..c.seeds).map(move |s| (n, s))).collect();
    let rows = cells
        .par_iter()
        .map(|&(n, s)| sample_sweep_cell(&core, &pop, n, s))
        .collect::<Result<Vec<_>, _>>()?;
    write_rows(out, &rows)?;
    let res = summarize_sample_sweep(&c.ns, rows)?;
    let xs: Vec<f64> = c.ns.iter().map(|n| *n as f64).collect();
    let s = [
        Series {
            label: "forward".into(),
            points: xs.iter().copied().zip(res.mean_forward.iter().copied()).collect(),
        },
        Series {
            label: "theta".into(),
            points: xs.iter().copied().zip(res.mean_theta.iter().copied()).collect(),
        },
    ];
    plot(out, "rates.svg", &s, "n", "mean error", true, true)?;
    let within = |v: f64| v >= c.slope_range[0] && v <= c.slope_range[1];
    Ok(json!({
        "forward_slope": res.forward_slope,
        "theta_slope": res.theta_slope,
        "mean_forward": res.mean_forward,
        "mean_theta": res.mean_theta,
        "pass": within(res.forward_slope) && within(res.theta_slope),
    }))
}

#[derive(Serialize)]
struct RecoveryCsvRow {
    n: usize,
    lambda: f64,
    error: f64,
    rank: Option<usize>,
    status: String,
    iterations: usize,
}

fn recovery(c: &RecoveryRun, model: Model, out: &Path) -> Result<Value, CliError> {
    let core = c.core(model)?;
    let mut ns = c.ns.clone();
    ns.sort_unstable();
    let paths: Vec<Result<Vec<RecoveryRow>, ifyot::Error>> = ns.par_iter().map(|&n| recovery_path(&core, n)).collect();
    let mut rows = Vec::new();
    let mut per_n = Vec::new();
    let mut series = Vec::new();
    let mut recovered_last = None;
    for (&n, path) in ns.iter().zip(paths) {
        let path = match path {
            Ok(p) => p,
            Err(e) => {
                per_n.push(json!({"n": n, "failed": e.to_string()}));
                continue;
            }
        };
        let curve: Vec<(f64, f64)> = path.iter().map(|r| (r.lambda, r.error)).collect();
        let best = best_of_curve(&curve);
        let at = path.iter().find(|r| r.lambda == best.best_lambda).expect("best λ is on the path");
        let recovered = match model {
            Model::Sparse => best.best_metric == 0.0,
            Model::LowRank => best.best_metric < 1.0,
        };
        recovered_last = Some(recovered);
        per_n.push(json!({
            "n": n,
            "best_lambda": best.best_lambda,
            "best_error": best.best_metric,
            "recovered": recovered,
            "theta_hat": at.theta,
        }));
        series.push(Series {
            label: format!("N={n}"),
            points: curve.iter().map(|(l, e)| (*l, *e)).collect(),
        });
        rows.extend(path.into_iter().map(|r| RecoveryCsvRow {
            n: r.n,
            lambda: r.lambda,
            error: r.error,
            rank: r.rank,
            status: status_str(&r.status),
            iterations: r.iterations,
        }));
    }
    write_rows(out, &rows)?;
    plot(out, "error_vs_lambda.svg", &series, "lambda", "error", true, false)?;
    let mut summary = json!({ "per_n": per_n, "recovered_at_largest_n": recovered_last });
    if let Some(expect) = c.expect_recovery {
        summary["expected_recovery"] = json!(expect);
        summary["pass"] = json!(recovered_last == Some(expect));
    }
    Ok(summary)
}
