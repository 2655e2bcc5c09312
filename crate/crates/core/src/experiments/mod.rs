//! Drivers behind the `foliation` binary: leaf samples, convergence studies,
//! Monte Carlo statistics, gap reports and membership checks.
//!
//! Every command reads a [`RunConfig`], writes CSV files into an output
//! directory together with a JSON manifest that records the full
//! configuration and the library version, and returns its summary.

pub mod config;
pub mod output;

mod converge;
mod gap;
mod leaf;
mod mc;
mod membership;

pub use config::{EtaPolicy, RunConfig};
pub use converge::{cmd_converge, ConvergenceReport};
pub use gap::{cmd_gap, GapSummary};
pub use leaf::{cmd_leaf, LeafFileSummary, LeafRun};
pub use mc::{cmd_mc, McReport, McRow};
pub use membership::{cmd_membership, MembershipRecord, MembershipSummary};

use crate::error::Result;
use crate::models::ModelSpec;
use crate::noise::{generate_brownian_path, ou_stationary, OuProcess};

/// Default xi grid of each command when the configuration has none.
fn default_xi_grid(model: &ModelSpec, fine: &str, example2: &str) -> String {
    if model.name() == "example2" {
        example2.to_string()
    } else {
        fine.to_string()
    }
}

/// Stationary OU process for `seed` covering `[t_min, max(t_max, extra)]`.
fn noise_for(cfg: &RunConfig, seed: u64, extra: f64) -> Result<OuProcess> {
    let path = generate_brownian_path(seed, cfg.t_min, cfg.t_max.max(extra), cfg.dt)?;
    ou_stationary(&path)
}
