use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{create, csv_row, write_manifest};
use super::{default_xi_grid, noise_for, RunConfig};
use crate::error::{Error, Result};
use crate::expansion::{DeterministicLeaf, ExpansionOptions};
use crate::leaf_solver::{lyapunov_perron_leaf_on_base, solve_random_equation};
use crate::parallel::Execution;
use crate::stats::{log_log_slope, mean_confidence_interval, slope};

/// Remainder of the expansion against the direct leaf, as a function of `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub epsilons: Vec<f64>,
    /// Mean over seeds of `max_xi |direct - expansion|`, per epsilon.
    pub mean_errors: Vec<f64>,
    pub counts: Vec<usize>,
    /// Least-squares slope of all `(log eps, log error)` pairs.
    pub slope: f64,
    pub seed_slopes: Vec<f64>,
    /// 95% Student-t interval of the per-seed slopes.
    pub slope_ci: (f64, f64),
    /// `(seed, eps)` pairs dropped because the direct solver did not converge.
    pub excluded: usize,
    pub order0: bool,
    pub seeds: Vec<u64>,
    /// `errors[s][e]`, `None` when excluded.
    pub errors: Vec<Vec<Option<f64>>>,
    pub files: Vec<PathBuf>,
}

/// Needs at least 3 positive, increasing epsilons and 5 seeds. Writes
/// `converge.csv` (seed, epsilon, error), `converge_summary.csv` and
/// `converge_manifest.json`.
pub fn cmd_converge(cfg: &RunConfig, out: &Path) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let phi0 = cfg.base_point(&model)?;
    let xi = cfg.xi_points(&model, &default_xi_grid(&model, "-1:1:0.25", "-0.1:0.1:0.05"))?;
    let eps = cfg.epsilons(&[0.02, 0.04, 0.08, 0.16])?;
    if eps.len() < 3 {
        return Err(Error::Config(format!(
            "a convergence study needs at least 3 epsilons, got {}",
            eps.len()
        )));
    }
    if eps.iter().any(|&e| e <= 0.0) {
        return Err(Error::Config(
            "epsilon = 0 has no logarithm; use strictly positive epsilons".into(),
        ));
    }
    if eps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("epsilons must be strictly increasing".into()));
    }
    let seeds = cfg.seed_list(1, 10);
    if seeds.len() < 5 {
        return Err(Error::Config(format!(
            "a convergence study needs at least 5 seeds, got {}",
            seeds.len()
        )));
    }
    let opts = cfg.expansion_options();
    let inner = ExpansionOptions {
        execution: Execution::Sequential,
        ..opts
    };
    let order0 = DeterministicLeaf::new(&model, &phi0, &xi, cfg.dt, &opts)?;
    let grid = *order0.grid();

    let per_seed = opts.execution.try_map(&seeds, |&seed| {
        let ou = noise_for(cfg, seed, 0.0)?;
        let approx = if cfg.order0 {
            order0.order_zero(0.0)
        } else {
            order0.with_noise(&model, 0.0, &ou, &inner)?
        };
        Ok::<_, Error>((ou, approx))
    })?;

    let tasks: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..eps.len()).map(move |e| (s, e)))
        .collect();
    let errors_flat = opts.execution.try_map(&tasks, |&(s, e)| -> Result<Option<f64>> {
        let (ou, approx) = &per_seed[s];
        let eps = eps[e];
        let base = match solve_random_equation(&model, &phi0, eps, ou, &grid) {
            Ok(b) if b.max_norm() <= model.blow_up_limit() => b,
            _ => return Ok(None),
        };
        let mut worst: f64 = 0.0;
        for sample in &approx.samples {
            let direct = lyapunov_perron_leaf_on_base(&model, &sample.xi, &base, eps, ou, &grid, &inner)?;
            if !direct.converged {
                return Ok(None);
            }
            worst = worst.max(direct.leaf_point.distance(&sample.predicted(eps)));
        }
        Ok(Some(worst))
    })?;
    let errors: Vec<Vec<Option<f64>>> = errors_flat.chunks(eps.len()).map(|c| c.to_vec()).collect();
    let excluded = errors_flat.iter().filter(|e| e.is_none()).count();
    if excluded > 0 {
        log::warn!("converge: {excluded} (seed, epsilon) pairs excluded, direct solver did not converge");
    }
    if errors_flat.iter().flatten().any(|&e| !(e > 0.0)) {
        return Err(Error::Domain(
            "leaf errors vanish on this xi grid; include points away from the base point".into(),
        ));
    }

    let mut mean_errors = Vec::new();
    let mut counts = Vec::new();
    for e in 0..eps.len() {
        let col: Vec<f64> = errors.iter().filter_map(|row| row[e]).collect();
        counts.push(col.len());
        mean_errors.push(if col.is_empty() {
            f64::NAN
        } else {
            col.iter().sum::<f64>() / col.len() as f64
        });
    }
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    let mut seed_slopes = Vec::new();
    for row in &errors {
        for (e, v) in row.iter().enumerate() {
            if let Some(v) = v {
                lx.push(eps[e].ln());
                ly.push(v.ln());
            }
        }
        if row.iter().all(Option::is_some) {
            let ys: Vec<f64> = row.iter().map(|v| v.unwrap()).collect();
            seed_slopes.push(log_log_slope(&eps, &ys));
        }
    }
    if lx.len() < 2 {
        return Err(Error::NoContraction {
            iterations: cfg.max_iterations,
            residual: f64::INFINITY,
            gap_value: f64::NAN,
        });
    }
    let report_slope = slope(&lx, &ly);
    let slope_ci = mean_confidence_interval(&seed_slopes, 0.95);

    let detail = out.join("converge.csv");
    let mut w = create(&detail)?;
    writeln!(w, "seed,epsilon,error")?;
    for (s, row) in errors.iter().enumerate() {
        for (e, v) in row.iter().enumerate() {
            writeln!(w, "{},{}", seeds[s], csv_row([eps[e], v.unwrap_or(f64::NAN)]))?;
        }
    }
    w.flush()?;
    let summary = out.join("converge_summary.csv");
    let mut w = create(&summary)?;
    writeln!(w, "epsilon,mean_error,count")?;
    for e in 0..eps.len() {
        writeln!(w, "{},{}", csv_row([eps[e], mean_errors[e]]), counts[e])?;
    }
    w.flush()?;

    let report = ConvergenceReport {
        epsilons: eps,
        mean_errors,
        counts,
        slope: report_slope,
        seed_slopes,
        slope_ci,
        excluded,
        order0: cfg.order0,
        seeds,
        errors,
        files: vec![detail, summary],
    };
    write_manifest(&out.join("converge_manifest.json"), "converge", cfg, &report.files, &report)?;
    Ok(report)
}
