//! `foliation`: leaf samples, convergence studies, Monte Carlo statistics,
//! gap reports and membership checks for random stable foliations.
//!
//! Exit status: 0 on success, 1 for configuration errors or an unsatisfied gap
//! condition, 2 when a computation blows up or fails to contract.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foliation::experiments::config::parse_list;
use foliation::experiments::{
    cmd_converge, cmd_gap, cmd_leaf, cmd_mc, cmd_membership, EtaPolicy, RunConfig,
};
use foliation::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "foliation", version, about = "Random stable foliations with small multiplicative noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the deterministic leaf and one noisy leaf per seed.
    Leaf(Common),
    /// Fit the order of the expansion remainder against the direct solver.
    Converge(Common),
    /// Ensemble statistics of the first-order correction.
    Mc(Common),
    /// Report the dichotomy constants and the gap condition.
    Gap(Common),
    /// Check decay of weighted differences for leaf and control points.
    Membership(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML file with run settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// example1, example2, zero or polynomial.
    #[arg(long)]
    model: Option<String>,
    /// Base point, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    phi0: Option<String>,
    /// start:stop:step per stable coordinate, separated by ';'.
    #[arg(long, allow_hyphen_values = true)]
    xi_grid: Option<String>,
    /// Noise intensity, or a comma-separated list for `converge`.
    #[arg(long)]
    epsilon: Option<String>,
    /// Single seed, or base seed together with --seed-count.
    #[arg(long)]
    seed: Option<u64>,
    /// Explicit comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    /// Number of seeds base, base + 1, ...
    #[arg(long)]
    seed_count: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Truncation horizon of the leaf integrals.
    #[arg(long)]
    t_max: Option<f64>,
    /// Start of the two-sided Brownian path.
    #[arg(long, allow_hyphen_values = true)]
    t_min: Option<f64>,
    /// Weight exponent: 'auto' or a number.
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Output directory.
    #[arg(long, env = "FOLIATION_OUT_DIR")]
    out: Option<PathBuf>,
    /// Diagonal of A, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    eigenvalues: Option<String>,
    /// Polynomial term component:coefficient:e1,e2,... (repeatable).
    #[arg(long = "term", allow_hyphen_values = true)]
    terms: Vec<String>,
    /// Cut-off radius of the nonlinearity.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Galerkin modes of example2.
    #[arg(long)]
    modes: Option<usize>,
    /// Override of the Lipschitz constant used by the gap condition.
    #[arg(long)]
    lipschitz: Option<f64>,
    /// Override of the dichotomy bound K.
    #[arg(long)]
    k_bound: Option<f64>,
    /// Drop the first-order term (converge).
    #[arg(long)]
    order0: bool,
    /// Forward horizon of the membership test.
    #[arg(long)]
    horizon: Option<f64>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.model {
            cfg.model = v.clone();
        }
        if let Some(v) = &self.phi0 {
            cfg.phi0 = Some(parse_list(v)?);
        }
        if let Some(v) = &self.xi_grid {
            cfg.xi_grid = Some(v.clone());
        }
        if let Some(v) = &self.epsilon {
            cfg.epsilon = Some(parse_list(v)?);
        }
        if let Some(v) = self.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = Some(parse_list(v)?);
        }
        if let Some(v) = self.seed_count {
            cfg.seed_count = Some(v);
        }
        if let Some(v) = self.dt {
            cfg.dt = v;
        }
        if let Some(v) = self.t_max {
            cfg.t_max = v;
        }
        if let Some(v) = self.t_min {
            cfg.t_min = v;
        }
        if let Some(v) = &self.eta {
            cfg.eta = EtaPolicy::parse(v)?;
        }
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &self.eigenvalues {
            cfg.eigenvalues = Some(parse_list(v)?);
        }
        if !self.terms.is_empty() {
            cfg.terms = self.terms.clone();
        }
        if let Some(v) = self.cutoff {
            cfg.cutoff = Some(v);
        }
        if let Some(v) = self.modes {
            cfg.modes = Some(v);
        }
        if let Some(v) = self.lipschitz {
            cfg.lipschitz = Some(v);
        }
        if let Some(v) = self.k_bound {
            cfg.k_bound = Some(v);
        }
        if self.order0 {
            cfg.order0 = true;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if self.sequential {
            cfg.sequential = true;
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Leaf(c) => {
            let cfg = c.resolve()?;
            let run = cmd_leaf(&cfg, &out_dir(&cfg))?;
            for f in &run.files {
                println!("wrote {}", f.display());
            }
            println!("manifest {}", run.manifest.display());
        }
        Command::Converge(c) => {
            let cfg = c.resolve()?;
            let r = cmd_converge(&cfg, &out_dir(&cfg))?;
            println!("epsilon,mean_error,count");
            for ((e, m), n) in r.epsilons.iter().zip(&r.mean_errors).zip(&r.counts) {
                println!("{e},{m:.6e},{n}");
            }
            println!("slope {:.4}", r.slope);
            println!("slope_ci_95 [{:.4}, {:.4}]", r.slope_ci.0, r.slope_ci.1);
            if r.excluded > 0 {
                println!("excluded {}", r.excluded);
            }
        }
        Command::Mc(c) => {
            let cfg = c.resolve()?;
            let r = cmd_mc(&cfg, &out_dir(&cfg))?;
            println!("seeds {}", r.seeds);
            println!("z0 mean {:.6} var {:.6} (se {:.6})", r.z0.mean, r.z0.variance, r.z0.variance_se);
            if let Some(m) = r.exp3_integral {
                println!("exp3 mean {:.6} var {:.6} (se {:.6})", m.mean, m.variance, m.variance_se);
            }
            for row in &r.rows {
                if let Some(g) = row.normalized {
                    println!(
                        "xi {:?}: g mean {:.6} (se {:.6}) var {:.6} (se {:.6})",
                        row.xi.coords(),
                        g.mean,
                        g.mean_se,
                        g.variance,
                        g.variance_se
                    );
                }
            }
        }
        Command::Gap(c) => {
            let cfg = c.resolve()?;
            let g = cmd_gap(&cfg)?;
            println!("alpha {:?}", g.alpha);
            println!("beta {:?}", g.beta);
            println!("K {:?}", g.bound_k);
            println!("L_F {:?}", g.lipschitz);
            println!("eta {:?}", g.eta);
            println!("gap_value {:?}", g.value);
            println!("margin {:?}", g.margin);
            println!("satisfied {}", g.satisfied);
            if !g.satisfied {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Membership(c) => {
            let cfg = c.resolve()?;
            let s = cmd_membership(&cfg, &out_dir(&cfg))?;
            println!("leaf decaying {}/{}", s.leaf_decaying, s.leaf_points);
            println!("controls decaying {}/{}", s.controls_decaying, s.controls);
            println!("base points {} (max weight {:e})", s.base_points, s.base_max_weight);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
