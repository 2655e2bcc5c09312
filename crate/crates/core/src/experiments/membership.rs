use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{create, csv_row, write_manifest};
use super::{default_xi_grid, noise_for, RunConfig};
use crate::dichotomy::{auto_eta, StateVector};
use crate::error::{Error, Result};
use crate::expansion::{DeterministicLeaf, ExpansionOptions};
use crate::leaf_solver::{verify_leaf_membership, MembershipReport};
use crate::parallel::Execution;

/// Unstable offset of the control points.
const CONTROL_OFFSET: f64 = 0.5;
/// Time points kept per weighted-norm curve in the output.
const CURVE_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    /// Expansion leaf point over `xi != P^s phi0`.
    Leaf,
    /// The base point itself.
    Base,
    /// `phi0` shifted along one unstable direction.
    Control,
}

impl PointKind {
    fn as_str(self) -> &'static str {
        match self {
            PointKind::Leaf => "leaf",
            PointKind::Base => "base",
            PointKind::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipRecord {
    pub seed: u64,
    pub kind: PointKind,
    pub point: StateVector,
    pub report: MembershipReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipSummary {
    pub epsilon: f64,
    pub eta: f64,
    pub horizon: f64,
    pub leaf_points: usize,
    pub leaf_decaying: usize,
    pub controls: usize,
    pub controls_decaying: usize,
    pub base_points: usize,
    pub base_max_weight: f64,
    pub files: Vec<PathBuf>,
    #[serde(skip)]
    pub records: Vec<MembershipRecord>,
}

impl MembershipSummary {
    pub fn leaf_fraction(&self) -> f64 {
        self.leaf_decaying as f64 / self.leaf_points.max(1) as f64
    }

    pub fn control_fail_fraction(&self) -> f64 {
        (self.controls - self.controls_decaying) as f64 / self.controls.max(1) as f64
    }
}

/// Checks expansion leaf points, the base point and unstable-offset controls
/// for decay of the weighted difference over the membership horizon. Writes
/// `membership.csv`, `membership_curves.csv` and `membership_manifest.json`.
pub fn cmd_membership(cfg: &RunConfig, out: &Path) -> Result<MembershipSummary> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let phi0 = cfg.base_point(&model)?;
    let xi = cfg.xi_points(&model, &default_xi_grid(&model, "-1:1:0.2", "-0.1:0.1:0.02"))?;
    let eps = cfg.single_epsilon(0.05)?;
    let seeds = cfg.seed_list(1, 10);
    let eta = cfg.eta.value().unwrap_or_else(|| auto_eta(model.split()));
    if model.split().unstable_set().is_empty() {
        return Err(Error::Config("membership controls need an unstable direction".into()));
    }
    let opts = cfg.expansion_options();
    let inner = ExpansionOptions {
        execution: Execution::Sequential,
        ..opts
    };
    let order0 = DeterministicLeaf::new(&model, &phi0, &xi, cfg.dt, &opts)?;
    let stable_phi0 = model.split().stable_coords(&phi0);

    let per_seed = opts.execution.try_map(&seeds, |&seed| -> Result<Vec<MembershipRecord>> {
        let ou = noise_for(cfg, seed, cfg.horizon)?;
        let leaf = order0.with_noise(&model, eps, &ou, &inner)?;
        let mut points: Vec<(PointKind, StateVector)> = leaf
            .samples
            .iter()
            .map(|s| {
                let kind = if model.split().stable_coords(&s.xi) == stable_phi0 {
                    PointKind::Base
                } else {
                    PointKind::Leaf
                };
                (kind, s.predicted(eps))
            })
            .collect();
        for &i in model.split().unstable_set() {
            let mut p = phi0.clone();
            p[i] += CONTROL_OFFSET;
            points.push((PointKind::Control, p));
        }
        points
            .into_iter()
            .map(|(kind, point)| {
                let report = verify_leaf_membership(&model, &point, &phi0, eps, &ou, eta, cfg.horizon)?;
                Ok(MembershipRecord {
                    seed,
                    kind,
                    point,
                    report,
                })
            })
            .collect()
    })?;
    let records: Vec<MembershipRecord> = per_seed.into_iter().flatten().collect();

    let count = |kind: PointKind, decaying: bool| {
        records
            .iter()
            .filter(|r| r.kind == kind && (!decaying || r.report.decaying))
            .count()
    };
    let base_max_weight = records
        .iter()
        .filter(|r| r.kind == PointKind::Base)
        .map(|r| r.report.weighted_sup)
        .fold(0.0, f64::max);

    let table = out.join("membership.csv");
    let mut w = create(&table)?;
    let mut header = vec!["record".to_string(), "seed".into(), "kind".into()];
    header.extend((1..=model.dim()).map(|i| format!("point_{i}")));
    header.extend(["weighted_sup", "initial", "terminal", "decaying"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for (k, r) in records.iter().enumerate() {
        let mut vals: Vec<f64> = r.point.coords().to_vec();
        vals.extend([r.report.weighted_sup, r.report.initial, r.report.terminal]);
        writeln!(
            w,
            "{k},{},{},{},{}",
            r.seed,
            r.kind.as_str(),
            csv_row(vals),
            u8::from(r.report.decaying)
        )?;
    }
    w.flush()?;

    let curves = out.join("membership_curves.csv");
    let mut w = create(&curves)?;
    writeln!(w, "record,t,weighted_norm")?;
    for (k, r) in records.iter().enumerate() {
        let stride = (r.report.curve.len() - 1).div_ceil(CURVE_POINTS - 1).max(1);
        for (t, v) in r.report.curve.iter().step_by(stride) {
            writeln!(w, "{k},{}", csv_row([*t, *v]))?;
        }
    }
    w.flush()?;

    let summary = MembershipSummary {
        epsilon: eps,
        eta,
        horizon: cfg.horizon,
        leaf_points: count(PointKind::Leaf, false),
        leaf_decaying: count(PointKind::Leaf, true),
        controls: count(PointKind::Control, false),
        controls_decaying: count(PointKind::Control, true),
        base_points: count(PointKind::Base, false),
        base_max_weight,
        files: vec![table, curves],
        records,
    };
    write_manifest(
        &out.join("membership_manifest.json"),
        "membership",
        cfg,
        &summary.files,
        &summary,
    )?;
    Ok(summary)
}
