use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{create, csv_row, write_manifest};
use super::{default_xi_grid, noise_for, RunConfig};
use crate::dichotomy::StateVector;
use crate::error::{Error, Result};
use crate::expansion::{DeterministicLeaf, ExpansionOptions};
use crate::noise::ito_integral;
use crate::parallel::Execution;
use crate::stats::{moments, Moments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub xi: StateVector,
    pub l_d: StateVector,
    /// One entry per unstable coordinate.
    pub l_1: Vec<Moments>,
    /// `l_1_y / (-(x^2 - x0^2)/3)` for the planar example, when defined.
    pub normalized: Option<Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub seeds: usize,
    pub epsilon: f64,
    pub rows: Vec<McRow>,
    /// `Z(w)` over the ensemble.
    pub z0: Moments,
    /// `int_0^T e^{-3 t} dW` over the ensemble (planar example only).
    pub exp3_integral: Option<Moments>,
    pub files: Vec<PathBuf>,
}

struct SeedResult {
    l_1: Vec<StateVector>,
    z0: f64,
    exp3: f64,
}

/// Needs at least 100 seeds. Writes `mc.csv` (per-xi moments of `l_1`),
/// `mc_noise.csv` and `mc_manifest.json`.
pub fn cmd_mc(cfg: &RunConfig, out: &Path) -> Result<McReport> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let phi0 = cfg.base_point(&model)?;
    let xi = cfg.xi_points(&model, &default_xi_grid(&model, "-1:1:0.5", "0.05"))?;
    let eps = cfg.single_epsilon(0.1)?;
    let seeds = cfg.seed_list(1, 10_000);
    if seeds.len() < 100 {
        return Err(Error::Config(format!(
            "Monte Carlo statistics need at least 100 seeds, got {}",
            seeds.len()
        )));
    }
    let planar = model.name() == "example1";
    let opts = cfg.expansion_options();
    let inner = ExpansionOptions {
        execution: Execution::Sequential,
        ..opts
    };
    let order0 = DeterministicLeaf::new(&model, &phi0, &xi, cfg.dt, &opts)?;
    let horizon = cfg.t_max;
    let results = opts.execution.try_map(&seeds, |&seed| -> Result<SeedResult> {
        let ou = noise_for(cfg, seed, 0.0)?;
        let leaf = order0.with_noise(&model, eps, &ou, &inner)?;
        let exp3 = if planar {
            ito_integral(ou.path(), |t| (-3.0 * t).exp(), 0.0, horizon)?
        } else {
            f64::NAN
        };
        Ok(SeedResult {
            l_1: leaf.samples.into_iter().map(|s| s.l_1).collect(),
            z0: ou.z0(),
            exp3,
        })
    })?;

    let unstable = model.split().unstable_set().to_vec();
    let x0 = phi0[0];
    let rows: Vec<McRow> = xi
        .iter()
        .zip(order0.terms())
        .enumerate()
        .map(|(j, (xi, d))| {
            let l_1 = unstable
                .iter()
                .map(|&i| moments(&results.iter().map(|r| r.l_1[j][i]).collect::<Vec<_>>()))
                .collect();
            let shape = -(xi[0] * xi[0] - x0 * x0) / 3.0;
            let normalized = (planar && shape != 0.0)
                .then(|| moments(&results.iter().map(|r| r.l_1[j][1] / shape).collect::<Vec<_>>()));
            McRow {
                xi: xi.clone(),
                l_d: d.value.clone(),
                l_1,
                normalized,
            }
        })
        .collect();
    let z0 = moments(&results.iter().map(|r| r.z0).collect::<Vec<_>>());
    let exp3_integral = planar.then(|| moments(&results.iter().map(|r| r.exp3).collect::<Vec<_>>()));

    let table = out.join("mc.csv");
    let mut w = create(&table)?;
    let stable = model.split().stable_set();
    let mut header: Vec<String> = (1..=stable.len()).map(|i| format!("xi_{i}")).collect();
    header.extend((1..=unstable.len()).map(|i| format!("l_d_{i}")));
    for i in 1..=unstable.len() {
        for stat in ["mean", "var", "se_mean", "se_var"] {
            header.push(format!("{stat}_l_1_{i}"));
        }
    }
    if planar {
        header.extend(["mean_g", "var_g", "se_mean_g", "se_var_g"].map(String::from));
    }
    writeln!(w, "{}", header.join(","))?;
    let quad = |m: &Moments| [m.mean, m.variance, m.mean_se, m.variance_se];
    for row in &rows {
        let mut vals: Vec<f64> = stable.iter().map(|&i| row.xi[i]).collect();
        vals.extend(unstable.iter().map(|&i| row.l_d[i]));
        for m in &row.l_1 {
            vals.extend(quad(m));
        }
        if planar {
            vals.extend(row.normalized.as_ref().map_or([f64::NAN; 4], quad));
        }
        writeln!(w, "{}", csv_row(vals))?;
    }
    w.flush()?;

    let noise = out.join("mc_noise.csv");
    let mut w = create(&noise)?;
    writeln!(w, "statistic,mean,var,se_mean,se_var")?;
    writeln!(w, "z0,{}", csv_row(quad(&z0)))?;
    if let Some(m) = &exp3_integral {
        writeln!(w, "int_exp_minus_3t_dw,{}", csv_row(quad(m)))?;
    }
    w.flush()?;

    let report = McReport {
        seeds: seeds.len(),
        epsilon: eps,
        rows,
        z0,
        exp3_integral,
        files: vec![table, noise],
    };
    write_manifest(&out.join("mc_manifest.json"), "mc", cfg, &report.files, &report)?;
    Ok(report)
}
