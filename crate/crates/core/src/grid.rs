//! Uniform forward time grid and flat trajectory storage.

use serde::{Deserialize, Serialize};

use crate::dichotomy::StateVector;
use crate::error::{Error, Result};

/// Relative slack allowed when checking that an interval is a whole number of steps.
pub(crate) const ALIGN_TOL: f64 = 1e-9;

/// Number of `dt` steps in `span`, or `None` if `span` is not a multiple of `dt`.
pub(crate) fn whole_steps(span: f64, dt: f64) -> Option<usize> {
    let n = span / dt;
    let rounded = n.round();
    if rounded < 0.0 || (n - rounded).abs() > ALIGN_TOL * rounded.max(1.0) {
        None
    } else {
        Some(rounded as usize)
    }
}

/// Times `0, dt, 2 dt, ..., steps * dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if !(horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        let steps = whole_steps(horizon, dt).ok_or_else(|| {
            Error::Config(format!("horizon {horizon} is not a multiple of dt = {dt}"))
        })?;
        Ok(Self { dt, steps })
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Grid restricted to the first `steps` steps.
    pub fn truncated(&self, steps: usize) -> Self {
        Self {
            dt: self.dt,
            steps: steps.min(self.steps),
        }
    }
}

/// Row-major trajectory: `len` states of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(dim: usize, len: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * len],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn state(&self, k: usize) -> StateVector {
        StateVector::new(self.row(k).to_vec())
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.len() - 1)
    }

    /// Coordinate `i` at every grid point.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.data.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// Largest Euclidean norm over the trajectory.
    pub fn max_norm(&self) -> f64 {
        (0..self.len())
            .map(|k| crate::dichotomy::norm(self.row(k)))
            .fold(0.0, f64::max)
    }
}
