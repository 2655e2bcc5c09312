//! Run configuration: a flat TOML file whose keys mirror the command-line flags.
//!
//! ```toml
//! model = "example1"
//! phi0 = [0.0, 0.0]
//! xi_grid = "-1:1:0.25"
//! epsilon = [0.02, 0.04, 0.08, 0.16]
//! seed = 1
//! seed_count = 10
//! dt = 1e-3
//! t_max = 20.0
//! eta = "auto"
//! ```
//!
//! Unset keys fall back to command defaults. Flags given on the command line
//! replace file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::dichotomy::{DichotomySplit, StateVector};
use crate::error::{Error, Result};
use crate::expansion::{ExpansionOptions, DEFAULT_HORIZON, DEFAULT_MAX_ITERATIONS, DEFAULT_TOL};
use crate::leaf_solver::DEFAULT_MEMBERSHIP_HORIZON;
use crate::models::{
    example1_model, example2_model, polynomial_model, ModelSpec, PolyTerm, ZeroField, EXAMPLE1_CUTOFF,
    EXAMPLE2_CUTOFF, EXAMPLE2_MODES,
};
use crate::noise::DEFAULT_T_MIN;
use crate::parallel::Execution;

/// Weight exponent choice: `"auto"` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EtaPolicy {
    #[default]
    Auto,
    Value(f64),
}

impl EtaPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        s.parse()
            .map(Self::Value)
            .map_err(|_| Error::Config(format!("eta must be 'auto' or a number, got '{s}'")))
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Self::Auto => None,
            Self::Value(v) => Some(v),
        }
    }
}

impl Serialize for EtaPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for EtaPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Self::Value(v)),
            Raw::Text(s) => Self::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(Option::<Raw>::deserialize(d)?.map(|r| match r {
        Raw::One(v) => vec![v],
        Raw::Many(v) => v,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `example1`, `example2`, `zero` or `polynomial`.
    pub model: String,
    pub eigenvalues: Option<Vec<f64>>,
    /// Polynomial terms `component:coefficient:e1,e2,...` (zero-based component).
    pub terms: Vec<String>,
    pub cutoff: Option<f64>,
    pub modes: Option<usize>,
    pub lipschitz: Option<f64>,
    pub k_bound: Option<f64>,
    pub phi0: Option<Vec<f64>>,
    /// `start:stop:step` per stable coordinate, separated by `;`.
    pub xi_grid: Option<String>,
    #[serde(deserialize_with = "one_or_many")]
    pub epsilon: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub seed_count: Option<usize>,
    pub dt: f64,
    pub t_max: f64,
    pub t_min: f64,
    pub eta: EtaPolicy,
    pub tol: f64,
    pub max_iterations: usize,
    pub out: Option<PathBuf>,
    /// Drop the first-order term in convergence studies.
    pub order0: bool,
    /// Forward horizon of the membership test.
    pub horizon: f64,
    pub sequential: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "example1".into(),
            eigenvalues: None,
            terms: Vec::new(),
            cutoff: None,
            modes: None,
            lipschitz: None,
            k_bound: None,
            phi0: None,
            xi_grid: None,
            epsilon: None,
            seed: None,
            seeds: None,
            seed_count: None,
            dt: 1e-3,
            t_max: DEFAULT_HORIZON,
            t_min: DEFAULT_T_MIN,
            eta: EtaPolicy::Auto,
            tol: DEFAULT_TOL,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            out: None,
            order0: false,
            horizon: DEFAULT_MEMBERSHIP_HORIZON,
            sequential: false,
        }
    }
}

/// Parses `component:coefficient:e1,e2,...`.
pub fn parse_term(s: &str) -> Result<PolyTerm> {
    let bad = || Error::Config(format!("polynomial term '{s}' is not of the form component:coefficient:e1,e2,..."));
    let mut parts = s.trim().split(':');
    let (Some(c), Some(k), Some(e), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    let component = c.trim().parse().map_err(|_| bad())?;
    let coefficient = k.trim().parse().map_err(|_| bad())?;
    let exponents = e
        .split(',')
        .map(|x| x.trim().parse::<u32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    Ok(PolyTerm {
        component,
        coefficient,
        exponents,
    })
}

/// Values `start, start + step, ...` up to `stop` (inclusive within 1e-9 step).
pub fn parse_range(s: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::Config(format!("range '{s}': {why}"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("expected start:stop:step with numbers"))?;
    match parts.as_slice() {
        [v] => Ok(vec![*v]),
        [start, stop, step] => {
            if !(step.is_finite() && *step > 0.0) || !(start.is_finite() && stop.is_finite()) {
                return Err(bad("step must be positive and bounds finite"));
            }
            if stop < start {
                return Err(bad("stop is below start"));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..count).map(|k| start + k as f64 * step).collect())
        }
        _ => Err(bad("expected start:stop:step or a single value")),
    }
}

/// Cartesian grid over the stable coordinates. Coordinates without a range are 0.
pub fn parse_xi_grid(s: &str, split: &DichotomySplit) -> Result<Vec<StateVector>> {
    let ranges: Vec<Vec<f64>> = s
        .split(';')
        .filter(|p| !p.trim().is_empty())
        .map(parse_range)
        .collect::<Result<_>>()?;
    let stable = split.stable_set();
    if ranges.is_empty() {
        return Err(Error::Config("xi grid is empty".into()));
    }
    if ranges.len() > stable.len() {
        return Err(Error::Config(format!(
            "xi grid has {} ranges but the model has {} stable coordinates",
            ranges.len(),
            stable.len()
        )));
    }
    let mut points = vec![Vec::new()];
    for range in &ranges {
        points = points
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                range.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    points
        .into_iter()
        .map(|mut coords| {
            coords.resize(stable.len(), 0.0);
            split.embed_stable(&coords)
        })
        .collect()
}

/// Parses a comma-separated list of numbers.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse '{}' in list '{s}'", p.trim())))
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Builds the model and applies the spectrum, bound and Lipschitz overrides.
    pub fn build_model(&self) -> Result<ModelSpec> {
        let mut model = match self.model.as_str() {
            "example1" => example1_model(self.cutoff.unwrap_or(EXAMPLE1_CUTOFF))?,
            "example2" => example2_model(
                self.modes.unwrap_or(EXAMPLE2_MODES),
                self.cutoff.unwrap_or(EXAMPLE2_CUTOFF),
            )?,
            "zero" | "linear" => {
                let eigs = self.eigenvalues.clone().unwrap_or_else(|| vec![-1.0, 1.0]);
                let split = DichotomySplit::from_eigenvalues(eigs)?;
                let dim = split.dim();
                ModelSpec::new("zero", split, std::sync::Arc::new(ZeroField::new(dim)))?
            }
            "polynomial" => {
                let eigs = self
                    .eigenvalues
                    .clone()
                    .ok_or_else(|| Error::Config("polynomial model needs eigenvalues".into()))?;
                let terms = self.terms.iter().map(|t| parse_term(t)).collect::<Result<Vec<_>>>()?;
                polynomial_model(eigs, terms, self.cutoff)?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown model '{other}' (expected example1, example2, zero or polynomial)"
                )))
            }
        };
        if let (Some(eigs), "example1" | "example2") = (&self.eigenvalues, self.model.as_str()) {
            model = model.with_split(DichotomySplit::from_eigenvalues(eigs.clone())?)?;
        }
        if let Some(k) = self.k_bound {
            let s = model.split().clone();
            let (a, b) = (s.alpha(), s.beta());
            model = model.with_split(s.with_constants(a, b, k)?)?;
        }
        if let Some(l) = self.lipschitz {
            model = model.with_lipschitz(l)?;
        }
        Ok(model)
    }

    pub fn base_point(&self, model: &ModelSpec) -> Result<StateVector> {
        match &self.phi0 {
            None => Ok(StateVector::zeros(model.dim())),
            Some(v) if v.len() == model.dim() => Ok(StateVector::new(v.clone())),
            Some(v) => Err(Error::Dimension {
                expected: model.dim(),
                found: v.len(),
            }),
        }
    }

    /// The configured xi grid, or `default` (a range over the first stable coordinate).
    pub fn xi_points(&self, model: &ModelSpec, default: &str) -> Result<Vec<StateVector>> {
        parse_xi_grid(self.xi_grid.as_deref().unwrap_or(default), model.split())
    }

    pub fn epsilons(&self, default: &[f64]) -> Result<Vec<f64>> {
        let eps = self.epsilon.clone().unwrap_or_else(|| default.to_vec());
        if eps.is_empty() {
            return Err(Error::Config("epsilon list is empty".into()));
        }
        if let Some(bad) = eps.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {bad}")));
        }
        Ok(eps)
    }

    pub fn single_epsilon(&self, default: f64) -> Result<f64> {
        match self.epsilons(&[default])?.as_slice() {
            [e] => Ok(*e),
            many => Err(Error::Config(format!(
                "this command takes a single epsilon, got {}",
                many.len()
            ))),
        }
    }

    /// Explicit list, else `seed + k` for `k < seed_count`, else the single seed,
    /// else `default_base + k` for `k < default_count`.
    pub fn seed_list(&self, default_base: u64, default_count: usize) -> Vec<u64> {
        if let Some(s) = &self.seeds {
            return s.clone();
        }
        match (self.seed, self.seed_count) {
            (base, Some(count)) => {
                let base = base.unwrap_or(default_base);
                (0..count as u64).map(|k| base + k).collect()
            }
            (Some(s), None) => vec![s],
            (None, None) => (0..default_count as u64).map(|k| default_base + k).collect(),
        }
    }

    pub fn expansion_options(&self) -> ExpansionOptions {
        ExpansionOptions {
            horizon: self.t_max,
            tol: self.tol,
            max_iterations: self.max_iterations,
            eta: self.eta.value(),
            execution: if self.sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_max > 0.0) || !(self.t_min < 0.0) {
            return Err(Error::Config(format!(
                "need t_min < 0 < t_max, got t_min {} and t_max {}",
                self.t_min, self.t_max
            )));
        }
        if !(self.tol > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config("tol must be positive and max_iterations at least 1".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!("membership horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }
}
