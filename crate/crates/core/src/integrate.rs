//! Time-stepping kernels shared by the expansion and the direct solver.
//!
//! Two schemes live here:
//!
//! * [`Sweep`]: variation-of-constants propagation for a diagonal `A` with a
//!   forcing known on the grid. Stable coordinates run forward from their
//!   initial value, unstable ones backward from zero at the horizon. Within a
//!   step the forcing is interpolated linearly and the exponential is
//!   integrated exactly, so the scheme is exact for piecewise-linear forcing
//!   and unconditionally stable for stiff modes.
//! * [`rk4`]: classical Runge-Kutta for the random ODEs, with the OU
//!   coefficient at half steps taken as the average of its grid neighbours.

use crate::error::{Error, Result};
use crate::grid::{TimeGrid, Trajectory};

/// `phi1(a) = (e^a - 1)/a` and `phi2(a) = (e^a - 1 - a)/a^2`.
pub(crate) fn phi12(a: f64) -> (f64, f64) {
    if a.abs() < 1e-3 {
        let a2 = a * a;
        let p1 = 1.0 + a / 2.0 + a2 / 6.0 + a2 * a / 24.0 + a2 * a2 / 120.0;
        let p2 = 0.5 + a / 6.0 + a2 / 24.0 + a2 * a / 120.0 + a2 * a2 / 720.0;
        (p1, p2)
    } else {
        let em1 = a.exp_m1();
        (em1 / a, (em1 - a) / (a * a))
    }
}

#[derive(Debug, Clone, Copy)]
struct StepWeights {
    // e^{lambda h} forward, e^{-lambda h} backward
    propagator: f64,
    // weight of the forcing at the point being updated
    near: f64,
    // weight of the forcing at the point already known
    far: f64,
    unstable: bool,
}

/// Linear-forcing exponential propagator for every coordinate of a diagonal operator.
#[derive(Debug, Clone)]
pub(crate) struct Sweep {
    weights: Vec<StepWeights>,
    grid: TimeGrid,
}

impl Sweep {
    pub fn new(eigenvalues: &[f64], grid: TimeGrid) -> Self {
        let h = grid.dt;
        let weights = eigenvalues
            .iter()
            .map(|&lambda| {
                let unstable = lambda > 0.0;
                // forward: integrate e^{lambda (h - s)} g(s); backward: e^{-lambda s} g(s)
                let a = if unstable { -lambda * h } else { lambda * h };
                let (p1, p2) = phi12(a);
                StepWeights {
                    propagator: a.exp(),
                    near: h * p2,
                    far: h * (p1 - p2),
                    unstable,
                }
            })
            .collect();
        Self { weights, grid }
    }

    /// Returns `psi` with
    /// `P^s psi(t) = e^{At} xi + int_0^t e^{A(t-s)} P^s g(s) ds` and
    /// `P^u psi(t) = -int_t^T e^{A(t-s)} P^u g(s) ds`.
    pub fn apply(&self, stable_initial: &[f64], forcing: &Trajectory, out: &mut Trajectory) {
        let n = self.grid.len();
        debug_assert_eq!(forcing.len(), n);
        for (i, w) in self.weights.iter().enumerate() {
            if w.unstable {
                out.row_mut(n - 1)[i] = 0.0;
                for k in (0..n - 1).rev() {
                    let next = out.row(k + 1)[i];
                    let g_near = forcing.row(k)[i];
                    let g_far = forcing.row(k + 1)[i];
                    out.row_mut(k)[i] = w.propagator * next - (w.near * g_near + w.far * g_far);
                }
            } else {
                out.row_mut(0)[i] = stable_initial[i];
                for k in 0..n - 1 {
                    let prev = out.row(k)[i];
                    let g_far = forcing.row(k)[i];
                    let g_near = forcing.row(k + 1)[i];
                    out.row_mut(k + 1)[i] = w.propagator * prev + w.far * g_far + w.near * g_near;
                }
            }
        }
    }

    /// `e^{At} xi` on the stable coordinates, zero on the unstable ones.
    pub fn homogeneous(&self, stable_initial: &[f64], out: &mut Trajectory) {
        let n = self.grid.len();
        for (i, w) in self.weights.iter().enumerate() {
            if w.unstable {
                for k in 0..n {
                    out.row_mut(k)[i] = 0.0;
                }
            } else {
                out.row_mut(0)[i] = stable_initial[i];
                for k in 1..n {
                    let prev = out.row(k - 1)[i];
                    out.row_mut(k)[i] = w.propagator * prev;
                }
            }
        }
    }
}

/// OU coefficient at the four RK4 stage times of step `k`.
#[inline]
pub(crate) fn stage_noise(z: &[f64], k: usize) -> [f64; 3] {
    [z[k], 0.5 * (z[k] + z[k + 1]), z[k + 1]]
}

/// Classical RK4 for `y' = f(z(t), y)` on `grid`; `z` holds the OU coefficient on
/// the grid (or zeros for deterministic problems). Fails when the norm of the
/// components `[0, watched)` exceeds `limit` or any value becomes non-finite.
pub(crate) fn rk4<F>(
    grid: &TimeGrid,
    z: &[f64],
    y0: &[f64],
    watched: usize,
    limit: f64,
    mut f: F,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y0.len();
    let h = grid.dt;
    let mut out = Trajectory::zeros(dim, grid.len());
    out.row_mut(0).copy_from_slice(y0);
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    for k in 0..grid.steps {
        let [z0, zm, z1] = stage_noise(z, k);
        y.copy_from_slice(out.row(k));
        f(z0, &y, &mut k1);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(zm, &tmp, &mut k2);
        for i in 0..dim {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(zm, &tmp, &mut k3);
        for i in 0..dim {
            tmp[i] = y[i] + h * k3[i];
        }
        f(z1, &tmp, &mut k4);
        let next = out.row_mut(k + 1);
        for i in 0..dim {
            next[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let norm = crate::dichotomy::norm(&next[..watched]);
        if !next.iter().all(|v| v.is_finite()) || norm > limit {
            return Err(Error::BlowUp {
                t: grid.time(k + 1),
                norm,
                limit,
            });
        }
    }
    Ok(out)
}

/// Outcome of a Lyapunov-Perron Picard iteration.
#[derive(Debug, Clone)]
pub(crate) struct LpOutcome {
    pub trajectory: Trajectory,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub history: Vec<f64>,
}

/// Picard iteration `psi <- Sweep(xi, g(psi))` with the residual measured in the
/// weighted sup norm `max_k w_k |psi_new(t_k) - psi(t_k)|`, `log_weights[k] = ln w_k`.
/// Stops early (not converged) when the iterates leave `limit` or stop being finite.
#[allow(clippy::too_many_arguments)]
pub(crate) fn iterate_lp<G>(
    sweep: &Sweep,
    stable_initial: &[f64],
    initial: Trajectory,
    log_weights: &[f64],
    tol: f64,
    max_iterations: usize,
    limit: f64,
    mut forcing: G,
) -> LpOutcome
where
    G: FnMut(&Trajectory, &mut Trajectory),
{
    let dim = initial.dim();
    let len = initial.len();
    let mut current = initial;
    let mut next = Trajectory::zeros(dim, len);
    let mut g = Trajectory::zeros(dim, len);
    let mut history = Vec::new();
    // direct weights where representable, log form otherwise
    let weights: Vec<f64> = log_weights.iter().map(|l| l.exp()).collect();
    for iteration in 1..=max_iterations {
        forcing(&current, &mut g);
        sweep.apply(stable_initial, &g, &mut next);
        let mut residual: f64 = 0.0;
        let mut finite = true;
        for k in 0..len {
            let d = next
                .row(k)
                .iter()
                .zip(current.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if !d.is_finite() {
                finite = false;
                break;
            }
            let w = weights[k];
            if w > 0.0 && w.is_finite() {
                residual = residual.max(w * d);
            } else if d > 0.0 {
                residual = residual.max((log_weights[k] + d.ln()).exp());
            }
        }
        std::mem::swap(&mut current, &mut next);
        if !finite || !residual.is_finite() || (limit.is_finite() && current.max_norm() > limit) {
            history.push(f64::INFINITY);
            return LpOutcome {
                trajectory: current,
                iterations: iteration,
                residual: f64::INFINITY,
                converged: false,
                history,
            };
        }
        history.push(residual);
        if residual < tol {
            return LpOutcome {
                trajectory: current,
                iterations: iteration,
                residual,
                converged: true,
                history,
            };
        }
    }
    let residual = history.last().copied().unwrap_or(f64::INFINITY);
    LpOutcome {
        trajectory: current,
        iterations: max_iterations,
        residual,
        converged: false,
        history,
    }
}
