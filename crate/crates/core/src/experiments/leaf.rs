use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{create, write_manifest};
use super::{default_xi_grid, noise_for, RunConfig};
use crate::dichotomy::GapReport;
use crate::error::Result;
use crate::expansion::{DeterministicLeaf, LeafApproximation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafFileSummary {
    pub file: PathBuf,
    pub seed: Option<u64>,
    pub epsilon: f64,
    pub dt: f64,
    pub horizon: f64,
    pub eta: f64,
    pub gap: Option<GapReport>,
    pub max_residual: f64,
    pub tail_bound: f64,
}

#[derive(Debug, Clone)]
pub struct LeafRun {
    pub deterministic: LeafApproximation,
    pub noisy: Vec<LeafApproximation>,
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
}

fn summary(file: PathBuf, leaf: &LeafApproximation) -> LeafFileSummary {
    LeafFileSummary {
        file,
        seed: leaf.seed,
        epsilon: leaf.epsilon,
        dt: leaf.dt,
        horizon: leaf.horizon,
        eta: leaf.eta,
        gap: leaf.gap,
        max_residual: leaf.max_residual,
        tail_bound: leaf.tail_bound,
    }
}

/// Writes `leaf_deterministic.csv`, one `leaf_seed_<seed>.csv` per seed and
/// `leaf_manifest.json` into `out`.
pub fn cmd_leaf(cfg: &RunConfig, out: &Path) -> Result<LeafRun> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let phi0 = cfg.base_point(&model)?;
    let xi = cfg.xi_points(&model, &default_xi_grid(&model, "-1:1:0.05", "-0.1:0.1:0.02"))?;
    let eps = cfg.single_epsilon(0.3)?;
    let seeds = cfg.seed_list(1, 2);
    let opts = cfg.expansion_options();
    let order0 = DeterministicLeaf::new(&model, &phi0, &xi, cfg.dt, &opts)?;
    let deterministic = order0.order_zero(0.0);
    let noisy = opts.execution.try_map(&seeds, |&seed| {
        let ou = noise_for(cfg, seed, 0.0)?;
        order0.with_noise(&model, eps, &ou, &opts)
    })?;

    let mut files = Vec::new();
    let mut summaries = Vec::new();
    let mut emit = |name: String, leaf: &LeafApproximation| -> Result<()> {
        let path = out.join(name);
        let mut w = create(&path)?;
        leaf.write_csv(&model, &mut w)?;
        w.flush()?;
        summaries.push(summary(path.clone(), leaf));
        files.push(path);
        Ok(())
    };
    emit("leaf_deterministic.csv".into(), &deterministic)?;
    for leaf in &noisy {
        emit(format!("leaf_seed_{}.csv", leaf.seed.unwrap_or_default()), leaf)?;
    }
    let manifest = out.join("leaf_manifest.json");
    write_manifest(&manifest, "leaf", cfg, &files, &summaries)?;
    log::info!("leaf: wrote {} files to {}", files.len(), out.display());
    Ok(LeafRun {
        deterministic,
        noisy,
        files,
        manifest,
    })
}
