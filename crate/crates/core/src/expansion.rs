//! First-order expansion of the random stable leaf in the noise intensity.
//!
//! For a base point `phi0` and a stable coordinate `xi` the leaf is
//! `xi + l_d(xi) + eps l_1(xi, w) + O(eps^2)`. Both terms are Lyapunov-Perron
//! fixed points on `[0, T]`:
//!
//! * order 0: `psi_d` is the bounded solution of
//!   `psi' = A psi + F(psi + phi_d) - F(phi_d)` with `P^s psi(0) = xi - P^s phi0`,
//!   and `l_d = P^u phi0 + P^u psi_d(0)`;
//! * order 1: `psi_1` is the bounded solution of
//!   `psi' = (A + F_u(psi_d + phi_d)) psi + lambda~(t)` with `P^s psi(0) = 0`,
//!   and `l_1 = P^u psi_1(0)`.
//!
//! The unstable components are integrated backward from the horizon, so the
//! fixed points never shoot forward along growing directions. The order-1
//! problem is the exact linearization in `eps` of the discrete scheme used by
//! [`crate::leaf_solver`], which makes the two directly comparable.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dichotomy::{auto_eta, check_gap_condition, norm, GapReport, StateVector};
use crate::error::{Error, Result};
use crate::grid::{TimeGrid, Trajectory};
use crate::integrate::{iterate_lp, rk4, Sweep};
use crate::models::ModelSpec;
use crate::noise::OuProcess;
use crate::parallel::Execution;

pub const DEFAULT_HORIZON: f64 = 20.0;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionOptions {
    /// Truncation horizon `T` of the improper integrals.
    pub horizon: f64,
    pub tol: f64,
    pub max_iterations: usize,
    /// Weight exponent of the residual norm; `None` picks [`auto_eta`].
    pub eta: Option<f64>,
    pub execution: Execution,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            tol: DEFAULT_TOL,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            eta: None,
            execution: Execution::default(),
        }
    }
}

impl ExpansionOptions {
    pub fn eta_for(&self, model: &ModelSpec) -> f64 {
        self.eta.unwrap_or_else(|| auto_eta(model.split()))
    }

    pub fn grid(&self, dt: f64) -> Result<TimeGrid> {
        TimeGrid::new(dt, self.horizon)
    }
}

/// A converged leaf term together with its fixed-point diagnostics.
#[derive(Debug, Clone)]
pub struct LeafTerm {
    /// Value in `H^u` (stable coordinates exactly zero).
    pub value: StateVector,
    pub trajectory: Trajectory,
    pub iterations: usize,
    pub residual: f64,
    /// Bound on the neglected tail `int_T^inf` of the backward integral.
    pub tail_bound: f64,
}

/// Per-path solution bundle of the expansion.
#[derive(Debug, Clone)]
pub struct ExpansionState {
    pub grid: TimeGrid,
    pub base_point: StateVector,
    pub xi: StateVector,
    pub phi_d: Trajectory,
    pub phi_1: Trajectory,
    pub psi_d: Trajectory,
    pub psi_1: Trajectory,
    pub l_d: StateVector,
    pub l_1: StateVector,
}

fn check_dim(model: &ModelSpec, v: &StateVector) -> Result<()> {
    if v.dim() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            found: v.dim(),
        });
    }
    Ok(())
}

fn check_in_stable(model: &ModelSpec, xi: &StateVector) -> Result<()> {
    check_dim(model, xi)?;
    if let Some(&i) = model.split().unstable_set().iter().find(|&&i| xi[i] != 0.0) {
        return Err(Error::Domain(format!(
            "leaf coordinate xi must lie in H^s, but unstable coordinate {i} is {}",
            xi[i]
        )));
    }
    Ok(())
}

fn eigen_times(model: &ModelSpec, u: &[f64], out: &mut [f64]) {
    for ((o, l), x) in out.iter_mut().zip(model.split().eigenvalues()).zip(u) {
        *o = l * x;
    }
}

/// Scratch space for the forcing terms, so the per-step work does not allocate.
pub(crate) struct Work {
    total: Vec<f64>,
    f_a: Vec<f64>,
    f_b: Vec<f64>,
    dir: Vec<f64>,
    d_a: Vec<f64>,
    d_b: Vec<f64>,
}

impl Work {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            total: vec![0.0; n],
            f_a: vec![0.0; n],
            f_b: vec![0.0; n],
            dir: vec![0.0; n],
            d_a: vec![0.0; n],
            d_b: vec![0.0; n],
        }
    }
}

/// `out = F(a + b) - F(b)`.
pub(crate) fn delta_f(model: &ModelSpec, a: &[f64], b: &[f64], w: &mut Work, out: &mut [f64]) {
    for ((t, x), y) in w.total.iter_mut().zip(a).zip(b) {
        *t = x + y;
    }
    model.field().eval(&w.total, out);
    model.field().eval(b, &mut w.f_b);
    for (o, s) in out.iter_mut().zip(&w.f_b) {
        *o -= s;
    }
}

/// Deterministic base trajectory `phi_d' = A phi_d + F(phi_d)`, `phi_d(0) = phi0` (RK4).
pub fn solve_phi_d(model: &ModelSpec, phi0: &StateVector, grid: &TimeGrid) -> Result<Trajectory> {
    check_dim(model, phi0)?;
    let z = vec![0.0; grid.len()];
    let n = model.dim();
    let mut fu = vec![0.0; n];
    rk4(grid, &z, phi0.coords(), n, model.blow_up_limit(), |_, y, out| {
        eigen_times(model, y, out);
        model.field().eval(y, &mut fu);
        for (o, f) in out.iter_mut().zip(&fu) {
            *o += f;
        }
    })
}

/// `B~ = -Z [ -phi_d + F(phi_d) - F_u(phi_d) phi_d ]`.
pub fn b_tilde(model: &ModelSpec, z: f64, phi_d: &[f64], out: &mut [f64]) {
    b_tilde_with(model, z, phi_d, &mut Work::new(phi_d.len()), out)
}

fn b_tilde_with(model: &ModelSpec, z: f64, phi_d: &[f64], w: &mut Work, out: &mut [f64]) {
    model.field().eval(phi_d, &mut w.f_b);
    model.field().derivative(phi_d, phi_d, &mut w.d_b);
    for i in 0..phi_d.len() {
        out[i] = -z * (-phi_d[i] + w.f_b[i] - w.d_b[i]);
    }
}

/// First-order base correction `phi_1' = (A + F_u(phi_d)) phi_1 + B~`, `phi_1(0) = 0`.
///
/// The pair `(phi_d, phi_1)` is integrated jointly by RK4, which makes `phi_1`
/// the exact `eps`-derivative of the RK4 solution of the random equation.
pub fn solve_phi_1(model: &ModelSpec, phi_d: &Trajectory, ou: &OuProcess, grid: &TimeGrid) -> Result<Trajectory> {
    let n = model.dim();
    if phi_d.dim() != n || phi_d.len() != grid.len() {
        return Err(Error::Dimension {
            expected: n,
            found: phi_d.dim(),
        });
    }
    let z = ou.forward(grid)?;
    // along the equilibrium phi_d = 0 the forcing reduces to -Z F(0)
    let mut f0 = vec![0.0; n];
    model.field().eval(&vec![0.0; n], &mut f0);
    if phi_d.max_norm() == 0.0 && f0.iter().all(|v| *v == 0.0) {
        return Ok(Trajectory::zeros(n, grid.len()));
    }
    let mut y0 = vec![0.0; 2 * n];
    y0[..n].copy_from_slice(phi_d.row(0));
    let joint = joint_phi(model, grid, z, &y0)?;
    let mut phi_1 = Trajectory::zeros(n, grid.len());
    for k in 0..grid.len() {
        phi_1.row_mut(k).copy_from_slice(&joint.row(k)[n..]);
    }
    Ok(phi_1)
}

fn joint_phi(model: &ModelSpec, grid: &TimeGrid, z: &[f64], y0: &[f64]) -> Result<Trajectory> {
    let n = model.dim();
    let mut f = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut work = Work::new(n);
    rk4(grid, z, y0, 2 * n, model.blow_up_limit(), |zt, y, out| {
        let (pd, p1) = y.split_at(n);
        let (od, o1) = out.split_at_mut(n);
        eigen_times(model, pd, od);
        model.field().eval(pd, &mut f);
        for (o, v) in od.iter_mut().zip(&f) {
            *o += v;
        }
        eigen_times(model, p1, o1);
        model.field().derivative(pd, p1, &mut tmp);
        b_tilde_with(model, zt, pd, &mut work, &mut b);
        for i in 0..n {
            o1[i] += tmp[i] + b[i];
        }
    })
}

/// Forward RK4 of `psi_d' = A psi_d + F(psi_d + phi_d) - F(phi_d)` from
/// `psi_d(0) = xi + l_d - phi0`, integrated jointly with `phi_d`.
///
/// Unstable components grow like `e^{alpha t}` in forward time, so this is only
/// meaningful on horizons where `l_d` errors stay small; [`compute_l_d`] uses
/// the backward Lyapunov-Perron form instead.
pub fn solve_psi_d(
    model: &ModelSpec,
    xi: &StateVector,
    phi0: &StateVector,
    l_d: &StateVector,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    check_in_stable(model, xi)?;
    check_dim(model, phi0)?;
    check_dim(model, l_d)?;
    let n = model.dim();
    let mut y0 = vec![0.0; 2 * n];
    y0[..n].copy_from_slice(phi0.coords());
    for i in 0..n {
        y0[n + i] = xi[i] + l_d[i] - phi0[i];
    }
    let z = vec![0.0; grid.len()];
    let mut work = Work::new(n);
    let mut d = vec![0.0; n];
    let mut f = vec![0.0; n];
    let joint = rk4(grid, &z, &y0, 2 * n, model.blow_up_limit(), |_, y, out| {
        let (pd, ps) = y.split_at(n);
        let (od, os) = out.split_at_mut(n);
        eigen_times(model, pd, od);
        model.field().eval(pd, &mut f);
        for (o, v) in od.iter_mut().zip(&f) {
            *o += v;
        }
        eigen_times(model, ps, os);
        delta_f(model, ps, pd, &mut work, &mut d);
        for (o, v) in os.iter_mut().zip(&d) {
            *o += v;
        }
    })?;
    let mut psi = Trajectory::zeros(n, grid.len());
    for k in 0..grid.len() {
        psi.row_mut(k).copy_from_slice(&joint.row(k)[n..]);
    }
    Ok(psi)
}

pub(crate) fn log_weights(grid: &TimeGrid, eta: f64, eps: f64, integral_z: Option<&[f64]>) -> Vec<f64> {
    (0..grid.len())
        .map(|k| -eta * grid.time(k) - integral_z.map_or(0.0, |iz| eps * iz[k]))
        .collect()
}

/// `K e^{(eta - alpha) T} sup_t e^{-eta t} |P^u g(t)| / (alpha - eta)`.
pub(crate) fn tail_bound(model: &ModelSpec, grid: &TimeGrid, eta: f64, forcing: &Trajectory) -> f64 {
    let split = model.split();
    if split.unstable_set().is_empty() {
        return 0.0;
    }
    let alpha = split.alpha();
    let mut sup: f64 = 0.0;
    for k in 0..grid.len() {
        let row = forcing.row(k);
        let pu = split.unstable_set().iter().map(|&i| row[i] * row[i]).sum::<f64>().sqrt();
        let w = (-eta * grid.time(k)).exp();
        if w > 0.0 && w.is_finite() {
            sup = sup.max(w * pu);
        } else if pu > 0.0 {
            sup = sup.max((pu.ln() - eta * grid.time(k)).exp());
        }
    }
    split.bound_k() * ((eta - alpha) * grid.horizon()).exp() * sup / (alpha - eta)
}

fn gap_value_or_nan(model: &ModelSpec, eta: f64) -> f64 {
    check_gap_condition(model.split(), model.lipschitz(), eta).map_or(f64::NAN, |g| g.value)
}

fn unstable_part(model: &ModelSpec, v: &[f64]) -> StateVector {
    let mut out = StateVector::zeros(model.dim());
    for &i in model.split().unstable_set() {
        out[i] = v[i];
    }
    out
}

/// Deterministic leaf map
/// `l_d(xi) = P^u phi0 - int_0^T e^{-As} P^u [F(phi_d + psi_d) - F(phi_d)] ds`,
/// iterated jointly with the bounded solution `psi_d`.
pub fn compute_l_d(
    model: &ModelSpec,
    xi: &StateVector,
    phi0: &StateVector,
    phi_d: &Trajectory,
    grid: &TimeGrid,
    opts: &ExpansionOptions,
) -> Result<LeafTerm> {
    check_in_stable(model, xi)?;
    check_dim(model, phi0)?;
    let n = model.dim();
    let eta = opts.eta_for(model);
    let sweep = Sweep::new(model.split().eigenvalues(), *grid);
    let xi_rel: Vec<f64> = (0..n)
        .map(|i| if model.split().is_unstable(i) { 0.0 } else { xi[i] - phi0[i] })
        .collect();
    let mut initial = Trajectory::zeros(n, grid.len());
    sweep.homogeneous(&xi_rel, &mut initial);
    let weights = log_weights(grid, eta, 0.0, None);
    let mut work = Work::new(n);
    let forcing = |psi: &Trajectory, g: &mut Trajectory| {
        for k in 0..psi.len() {
            delta_f(model, psi.row(k), phi_d.row(k), &mut work, g.row_mut(k));
        }
    };
    let outcome = iterate_lp(
        &sweep,
        &xi_rel,
        initial,
        &weights,
        opts.tol,
        opts.max_iterations,
        model.blow_up_limit(),
        forcing,
    );
    if !outcome.converged {
        return Err(Error::NoContraction {
            iterations: outcome.iterations,
            residual: outcome.residual,
            gap_value: gap_value_or_nan(model, eta),
        });
    }
    log::debug!(
        "l_d fixed point: {} iterations, residual {:.3e}",
        outcome.iterations,
        outcome.residual
    );
    let psi = outcome.trajectory;
    let mut g = Trajectory::zeros(n, grid.len());
    for k in 0..psi.len() {
        delta_f(model, psi.row(k), phi_d.row(k), &mut work, g.row_mut(k));
    }
    let mut value = unstable_part(model, phi0.coords());
    for &i in model.split().unstable_set() {
        value[i] += psi.row(0)[i];
    }
    Ok(LeafTerm {
        value,
        tail_bound: tail_bound(model, grid, eta, &g),
        trajectory: psi,
        iterations: outcome.iterations,
        residual: outcome.residual,
    })
}

/// Forcing of the order-1 difference equation apart from `F_u(psi_d + phi_d) psi_1`:
///
/// `lambda~ = Z [psi_d + F(phi_d) - F(psi_d + phi_d)]
///          + F_u(psi_d + phi_d)(phi_1 + Z (psi_d + phi_d)) - F_u(phi_d)(phi_1 + Z phi_d)`.
pub fn lambda_tilde(model: &ModelSpec, z: f64, psi_d: &[f64], phi_d: &[f64], phi_1: &[f64], out: &mut [f64]) {
    lambda_tilde_with(model, z, psi_d, phi_d, phi_1, &mut Work::new(psi_d.len()), out)
}

fn lambda_tilde_with(
    model: &ModelSpec,
    z: f64,
    psi_d: &[f64],
    phi_d: &[f64],
    phi_1: &[f64],
    w: &mut Work,
    out: &mut [f64],
) {
    let n = psi_d.len();
    for i in 0..n {
        w.total[i] = psi_d[i] + phi_d[i];
    }
    model.field().eval(&w.total, &mut w.f_a);
    model.field().eval(phi_d, &mut w.f_b);
    for i in 0..n {
        w.dir[i] = phi_1[i] + z * w.total[i];
    }
    model.field().derivative(&w.total, &w.dir, &mut w.d_a);
    for i in 0..n {
        w.dir[i] = phi_1[i] + z * phi_d[i];
    }
    model.field().derivative(phi_d, &w.dir, &mut w.d_b);
    for i in 0..n {
        out[i] = z * (psi_d[i] + w.f_b[i] - w.f_a[i]) + w.d_a[i] - w.d_b[i];
    }
}

/// Forward RK4 of the order-1 difference equation
/// `psi_1' = (A + F_u(psi_d + phi_d)) psi_1 + lambda~` from `psi_1(0) = l_1_guess`,
/// integrated jointly with `phi_d`, `phi_1` and `psi_d` (taken from `state`).
pub fn solve_psi_1(
    model: &ModelSpec,
    state: &ExpansionState,
    ou: &OuProcess,
    l_1_guess: &StateVector,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    check_dim(model, l_1_guess)?;
    if let Some(&i) = model.split().stable_set().iter().find(|&&i| l_1_guess[i] != 0.0) {
        return Err(Error::Domain(format!(
            "psi_1(0) must lie in H^u, but stable coordinate {i} is {}",
            l_1_guess[i]
        )));
    }
    let n = model.dim();
    let z = ou.forward(grid)?;
    let mut y0 = vec![0.0; 4 * n];
    y0[..n].copy_from_slice(state.phi_d.row(0));
    y0[n..2 * n].copy_from_slice(state.phi_1.row(0));
    y0[2 * n..3 * n].copy_from_slice(state.psi_d.row(0));
    y0[3 * n..].copy_from_slice(l_1_guess.coords());
    let mut f = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut work = Work::new(n);
    let mut lam = vec![0.0; n];
    let joint = rk4(grid, z, &y0, 4 * n, model.blow_up_limit(), |zt, y, out| {
        let (pd, rest) = y.split_at(n);
        let (p1, rest) = rest.split_at(n);
        let (sd, s1) = rest.split_at(n);
        let (od, orest) = out.split_at_mut(n);
        let (o1, orest) = orest.split_at_mut(n);
        let (osd, os1) = orest.split_at_mut(n);

        eigen_times(model, pd, od);
        model.field().eval(pd, &mut f);
        for i in 0..n {
            od[i] += f[i];
        }
        eigen_times(model, p1, o1);
        model.field().derivative(pd, p1, &mut tmp);
        b_tilde_with(model, zt, pd, &mut work, &mut b);
        for i in 0..n {
            o1[i] += tmp[i] + b[i];
        }
        eigen_times(model, sd, osd);
        delta_f(model, sd, pd, &mut work, &mut f);
        for i in 0..n {
            osd[i] += f[i];
        }
        eigen_times(model, s1, os1);
        lambda_tilde_with(model, zt, sd, pd, p1, &mut work, &mut lam);
        // lambda_tilde_with leaves psi_d + phi_d in work.total
        model.field().derivative(&work.total, s1, &mut tmp);
        for i in 0..n {
            os1[i] += tmp[i] + lam[i];
        }
    })?;
    let mut psi = Trajectory::zeros(n, grid.len());
    for k in 0..grid.len() {
        psi.row_mut(k).copy_from_slice(&joint.row(k)[3 * n..]);
    }
    Ok(psi)
}

/// First-order leaf correction `l_1 = P^u psi_1(0)` where `psi_1` is the bounded
/// solution of the order-1 difference equation with zero stable initial data:
/// `l_1 = -int_0^T e^{-As} P^u [F_u(psi_d + phi_d) psi_1 + lambda~] ds`.
///
/// `state` must carry `phi_d`, `phi_1` and `psi_d`; its `psi_1` is ignored.
pub fn compute_l_1(
    model: &ModelSpec,
    state: &ExpansionState,
    ou: &OuProcess,
    grid: &TimeGrid,
    opts: &ExpansionOptions,
) -> Result<LeafTerm> {
    let n = model.dim();
    let z = ou.forward(grid)?;
    let eta = opts.eta_for(model);
    let sweep = Sweep::new(model.split().eigenvalues(), *grid);
    let mut lam = Trajectory::zeros(n, grid.len());
    let mut totals = Trajectory::zeros(n, grid.len());
    let mut work = Work::new(n);
    for k in 0..grid.len() {
        lambda_tilde_with(
            model,
            z[k],
            state.psi_d.row(k),
            state.phi_d.row(k),
            state.phi_1.row(k),
            &mut work,
            lam.row_mut(k),
        );
        for i in 0..n {
            totals.row_mut(k)[i] = state.psi_d.row(k)[i] + state.phi_d.row(k)[i];
        }
    }
    let zero = vec![0.0; n];
    let weights = log_weights(grid, eta, 0.0, None);
    let forcing = |psi: &Trajectory, g: &mut Trajectory| {
        for k in 0..psi.len() {
            let out = g.row_mut(k);
            model.field().derivative(totals.row(k), psi.row(k), out);
            for (o, l) in out.iter_mut().zip(lam.row(k)) {
                *o += l;
            }
        }
    };
    let outcome = iterate_lp(
        &sweep,
        &zero,
        Trajectory::zeros(n, grid.len()),
        &weights,
        opts.tol,
        opts.max_iterations,
        f64::INFINITY,
        forcing,
    );
    if !outcome.converged {
        return Err(Error::NoContraction {
            iterations: outcome.iterations,
            residual: outcome.residual,
            gap_value: gap_value_or_nan(model, eta),
        });
    }
    let psi = outcome.trajectory;
    let mut g = Trajectory::zeros(n, grid.len());
    for k in 0..grid.len() {
        let out = g.row_mut(k);
        model.field().derivative(totals.row(k), psi.row(k), out);
        for (o, l) in out.iter_mut().zip(lam.row(k)) {
            *o += l;
        }
    }
    Ok(LeafTerm {
        value: unstable_part(model, psi.row(0)),
        tail_bound: tail_bound(model, grid, eta, &g),
        trajectory: psi,
        iterations: outcome.iterations,
        residual: outcome.residual,
    })
}

/// `l_1` through the expanded integral form
/// `-int_0^T e^{-As} P^u [ -(int_0^s Z) dF_0(s) + dG_1(s) ] ds`, where
/// `dF_0 = F(psi_d + phi_d) - F(phi_d)` and `dG_1` is the `eps`-coefficient of
/// `G(theta_s w, psi + phi) - G(theta_s w, phi)`. The Ornstein-Uhlenbeck weight
/// replaces the `Z psi_d` term of the difference equation; both forms agree
/// up to quadrature and truncation error. Uses trapezoidal quadrature.
pub fn l_1_integral_form(model: &ModelSpec, state: &ExpansionState, ou: &OuProcess) -> Result<StateVector> {
    let grid = &state.grid;
    let n = model.dim();
    let z = ou.forward(grid)?;
    let iz = ou.forward_integral(grid)?;
    let mut value = StateVector::zeros(n);
    let mut work = Work::new(n);
    let mut d0 = vec![0.0; n];
    let mut lam = vec![0.0; n];
    let mut fu = vec![0.0; n];
    for k in 0..grid.len() {
        let (sd, pd, p1, s1) = (
            state.psi_d.row(k),
            state.phi_d.row(k),
            state.phi_1.row(k),
            state.psi_1.row(k),
        );
        delta_f(model, sd, pd, &mut work, &mut d0);
        lambda_tilde_with(model, z[k], sd, pd, p1, &mut work, &mut lam);
        model.field().derivative(&work.total, s1, &mut fu);
        let t = grid.time(k);
        let w = if k == 0 || k == grid.steps { 0.5 } else { 1.0 } * grid.dt;
        for &i in model.split().unstable_set() {
            // dG_1 = lambda~ + F_u psi_1 - Z psi_d
            let dg1 = lam[i] + fu[i] - z[k] * sd[i];
            let integrand = -iz[k] * d0[i] + dg1;
            value[i] -= w * (-model.split().eigenvalues()[i] * t).exp() * integrand;
        }
    }
    Ok(value)
}

/// Full order-0 and order-1 solution for one leaf coordinate.
pub fn expand_point(
    model: &ModelSpec,
    xi: &StateVector,
    phi0: &StateVector,
    ou: &OuProcess,
    opts: &ExpansionOptions,
) -> Result<ExpansionState> {
    let grid = opts.grid(ou.path().dt())?;
    let phi_d = solve_phi_d(model, phi0, &grid)?;
    let phi_1 = solve_phi_1(model, &phi_d, ou, &grid)?;
    expand_with_base(model, xi, phi0, &phi_d, &phi_1, Some(ou), &grid, opts).map(|(s, _, _)| s)
}

#[allow(clippy::too_many_arguments)]
fn expand_with_base(
    model: &ModelSpec,
    xi: &StateVector,
    phi0: &StateVector,
    phi_d: &Trajectory,
    phi_1: &Trajectory,
    ou: Option<&OuProcess>,
    grid: &TimeGrid,
    opts: &ExpansionOptions,
) -> Result<(ExpansionState, LeafTerm, Option<LeafTerm>)> {
    let order0 = compute_l_d(model, xi, phi0, phi_d, grid, opts)?;
    let n = model.dim();
    let mut state = ExpansionState {
        grid: *grid,
        base_point: phi0.clone(),
        xi: xi.clone(),
        phi_d: phi_d.clone(),
        phi_1: phi_1.clone(),
        psi_d: order0.trajectory.clone(),
        psi_1: Trajectory::zeros(n, grid.len()),
        l_d: order0.value.clone(),
        l_1: StateVector::zeros(n),
    };
    let order1 = match ou {
        Some(ou) => {
            let term = compute_l_1(model, &state, ou, grid, opts)?;
            state.psi_1 = term.trajectory.clone();
            state.l_1 = term.value.clone();
            Some(term)
        }
        None => None,
    };
    Ok((state, order0, order1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafSample {
    pub xi: StateVector,
    pub l_d: StateVector,
    pub l_1: StateVector,
    pub iterations_d: usize,
    pub iterations_1: usize,
    pub residual_d: f64,
    pub residual_1: f64,
}

impl LeafSample {
    /// `xi + l_d + eps l_1`.
    pub fn predicted(&self, eps: f64) -> StateVector {
        (&self.xi + &self.l_d).axpy(eps, &self.l_1)
    }
}

/// Sampled first-order leaf through a base point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafApproximation {
    pub base_point: StateVector,
    pub epsilon: f64,
    pub seed: Option<u64>,
    pub horizon: f64,
    pub dt: f64,
    pub eta: f64,
    pub gap: Option<GapReport>,
    pub tail_bound: f64,
    pub max_residual: f64,
    pub samples: Vec<LeafSample>,
}

impl LeafApproximation {
    pub fn predicted(&self) -> Vec<StateVector> {
        self.samples.iter().map(|s| s.predicted(self.epsilon)).collect()
    }

    /// CSV with columns `xi_*` (stable coordinates), `l_d_*`, `l_1_*` (unstable
    /// coordinates) and `leaf_pred_*` (all coordinates), 17 significant digits.
    pub fn write_csv<W: Write>(&self, model: &ModelSpec, mut out: W) -> Result<()> {
        use crate::experiments::output::fmt17;
        let split = model.split();
        let s = split.stable_set();
        let u = split.unstable_set();
        let mut header: Vec<String> = Vec::new();
        header.extend((1..=s.len()).map(|i| format!("xi_{i}")));
        header.extend((1..=u.len()).map(|i| format!("l_d_{i}")));
        header.extend((1..=u.len()).map(|i| format!("l_1_{i}")));
        header.extend((1..=model.dim()).map(|i| format!("leaf_pred_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for sample in &self.samples {
            let pred = sample.predicted(self.epsilon);
            let row: Vec<String> = s
                .iter()
                .map(|&i| sample.xi[i])
                .chain(u.iter().map(|&i| sample.l_d[i]))
                .chain(u.iter().map(|&i| sample.l_1[i]))
                .chain(pred.coords().iter().copied())
                .map(fmt17)
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Order-0 part of a sampled leaf: `phi_d` and `(psi_d, l_d)` for every `xi`.
/// It does not depend on the noise, so ensembles compute it once.
#[derive(Debug, Clone)]
pub struct DeterministicLeaf {
    grid: TimeGrid,
    base_point: StateVector,
    phi_d: Trajectory,
    eta: f64,
    gap: Option<GapReport>,
    xi: Vec<StateVector>,
    terms: Vec<LeafTerm>,
}

impl DeterministicLeaf {
    pub fn new(
        model: &ModelSpec,
        phi0: &StateVector,
        xi_grid: &[StateVector],
        dt: f64,
        opts: &ExpansionOptions,
    ) -> Result<Self> {
        check_dim(model, phi0)?;
        let grid = opts.grid(dt)?;
        let eta = opts.eta_for(model);
        let gap = check_gap_condition(model.split(), model.lipschitz(), eta).ok();
        if let Some(g) = gap.filter(|g| !g.satisfied) {
            log::debug!(
                "gap condition not satisfied for {} (value {:.3}); relying on the iteration to contract",
                model.name(),
                g.value
            );
        }
        let phi_d = solve_phi_d(model, phi0, &grid)?;
        let terms = opts
            .execution
            .try_map(xi_grid, |xi| compute_l_d(model, xi, phi0, &phi_d, &grid, opts))?;
        Ok(Self {
            grid,
            base_point: phi0.clone(),
            phi_d,
            eta,
            gap,
            xi: xi_grid.to_vec(),
            terms,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn phi_d(&self) -> &Trajectory {
        &self.phi_d
    }

    pub fn xi(&self) -> &[StateVector] {
        &self.xi
    }

    pub fn terms(&self) -> &[LeafTerm] {
        &self.terms
    }

    fn approximation(&self, epsilon: f64, seed: Option<u64>, samples: Vec<LeafSample>, tail: f64) -> LeafApproximation {
        let max_residual = samples
            .iter()
            .map(|s| s.residual_d.max(s.residual_1))
            .fold(0.0, f64::max);
        LeafApproximation {
            base_point: self.base_point.clone(),
            epsilon,
            seed,
            horizon: self.grid.horizon(),
            dt: self.grid.dt,
            eta: self.eta,
            gap: self.gap,
            tail_bound: tail,
            max_residual,
            samples,
        }
    }

    /// Leaf `{xi + l_d(xi)}` with `l_1` reported as zero.
    pub fn order_zero(&self, epsilon: f64) -> LeafApproximation {
        let samples = self
            .xi
            .iter()
            .zip(&self.terms)
            .map(|(xi, d)| LeafSample {
                xi: xi.clone(),
                l_d: d.value.clone(),
                l_1: StateVector::zeros(xi.dim()),
                iterations_d: d.iterations,
                iterations_1: 0,
                residual_d: d.residual,
                residual_1: 0.0,
            })
            .collect();
        let tail = self.terms.iter().map(|d| d.tail_bound).fold(0.0, f64::max);
        self.approximation(epsilon, None, samples, tail)
    }

    /// Adds the first-order correction along one noise path.
    pub fn with_noise(
        &self,
        model: &ModelSpec,
        epsilon: f64,
        ou: &OuProcess,
        opts: &ExpansionOptions,
    ) -> Result<LeafApproximation> {
        if !(epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
        }
        let phi_1 = solve_phi_1(model, &self.phi_d, ou, &self.grid)?;
        let n = model.dim();
        let tasks: Vec<usize> = (0..self.xi.len()).collect();
        let results = opts.execution.try_map(&tasks, |&j| {
            let d = &self.terms[j];
            let state = ExpansionState {
                grid: self.grid,
                base_point: self.base_point.clone(),
                xi: self.xi[j].clone(),
                phi_d: self.phi_d.clone(),
                phi_1: phi_1.clone(),
                psi_d: d.trajectory.clone(),
                psi_1: Trajectory::zeros(n, self.grid.len()),
                l_d: d.value.clone(),
                l_1: StateVector::zeros(n),
            };
            compute_l_1(model, &state, ou, &self.grid, opts)
        })?;
        let mut tail: f64 = 0.0;
        let samples = self
            .xi
            .iter()
            .zip(&self.terms)
            .zip(results)
            .map(|((xi, d), one)| {
                tail = tail.max(d.tail_bound + epsilon * one.tail_bound);
                LeafSample {
                    xi: xi.clone(),
                    l_d: d.value.clone(),
                    l_1: one.value,
                    iterations_d: d.iterations,
                    iterations_1: one.iterations,
                    residual_d: d.residual,
                    residual_1: one.residual,
                }
            })
            .collect();
        Ok(self.approximation(epsilon, Some(ou.seed()), samples, tail))
    }
}

/// First-order leaf `{xi + l_d(xi) + eps l_1(xi, w)}` over a list of stable
/// coordinates. With `ou = None` only the deterministic leaf is computed and
/// `l_1` is reported as zero.
pub fn assemble_leaf(
    model: &ModelSpec,
    phi0: &StateVector,
    xi_grid: &[StateVector],
    epsilon: f64,
    ou: Option<&OuProcess>,
    dt: f64,
    opts: &ExpansionOptions,
) -> Result<LeafApproximation> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let order0 = DeterministicLeaf::new(model, phi0, xi_grid, dt, opts)?;
    match ou {
        Some(ou) => order0.with_noise(model, epsilon, ou, opts),
        None => Ok(order0.order_zero(epsilon)),
    }
}

/// Largest Euclidean distance between two trajectories on a common grid.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    (0..a.len().min(b.len()))
        .map(|k| {
            let d: Vec<f64> = a.row(k).iter().zip(b.row(k)).map(|(x, y)| x - y).collect();
            norm(&d)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::DichotomySplit;
    use crate::models::{example1_model, example2_model, ModelSpec, ZeroField};
    use crate::noise::{generate_brownian_path, ito_integral, ou_stationary};
    use std::sync::Arc;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec())
    }

    fn ex1() -> ModelSpec {
        example1_model(2.0).unwrap()
    }

    fn linear_ex1() -> ModelSpec {
        let split = DichotomySplit::from_eigenvalues(vec![-1.0, 1.0]).unwrap();
        ModelSpec::new("linear", split, Arc::new(ZeroField::new(2))).unwrap()
    }

    fn ou(seed: u64, dt: f64, t_max: f64) -> OuProcess {
        ou_stationary(&generate_brownian_path(seed, -20.0, t_max, dt).unwrap()).unwrap()
    }

    fn opts(horizon: f64) -> ExpansionOptions {
        ExpansionOptions {
            horizon,
            ..Default::default()
        }
    }

    #[test]
    fn phi_d_linear_and_equilibrium() {
        let grid = TimeGrid::new(1e-2, 5.0).unwrap();
        let traj = solve_phi_d(&linear_ex1(), &sv(&[1.0, 0.0]), &grid).unwrap();
        for k in (0..grid.len()).step_by(50) {
            assert!((traj.row(k)[0] - (-grid.time(k)).exp()).abs() < 1e-9);
            assert_eq!(traj.row(k)[1], 0.0);
        }
        let zero = solve_phi_d(&ex1(), &sv(&[0.0, 0.0]), &grid).unwrap();
        assert_eq!(zero.max_norm(), 0.0);
    }

    #[test]
    fn phi_d_on_stable_manifold_stays_bounded() {
        // y = -x^2/3 is invariant for x' = -x, y' = y + x^2
        let grid = TimeGrid::new(1e-3, 20.0).unwrap();
        let traj = solve_phi_d(&ex1(), &sv(&[1.0, -1.0 / 3.0]), &grid).unwrap();
        let worst = (0..grid.len())
            .map(|k| (traj.row(k)[1] + traj.row(k)[0].powi(2) / 3.0).abs())
            .fold(0.0, f64::max);
        // RK4 defect amplified by e^{t} along the unstable direction
        assert!(worst < 1e-3, "{worst}");
        assert!(traj.row(grid.steps / 2)[1].abs() < 1e-4);
    }

    #[test]
    fn phi_d_blow_up_is_reported() {
        let grid = TimeGrid::new(1e-2, 20.0).unwrap();
        let err = solve_phi_d(&ex1(), &sv(&[0.0, 1.0]), &grid).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn psi_d_forward_examples() {
        let grid = TimeGrid::new(1e-3, 10.0).unwrap();
        let m = ex1();
        let zero = sv(&[0.0, 0.0]);
        // same point: psi_d identically zero
        let phi0 = sv(&[0.5, -0.5 * 0.5 / 3.0]);
        let xi = sv(&[0.5, 0.0]);
        let l = sv(&[0.0, phi0[1]]);
        let psi = solve_psi_d(&m, &xi, &phi0, &l, &TimeGrid::new(1e-3, 3.0).unwrap()).unwrap();
        assert_eq!(psi.max_norm(), 0.0);
        // linear case decays from H^s
        let psi = solve_psi_d(&linear_ex1(), &sv(&[1.0, 0.0]), &zero, &zero, &grid).unwrap();
        assert!((psi.last()[0] - (-10.0f64).exp()).abs() < 1e-10);
        // nonlinear leaf point at eps = 0
        let psi = solve_psi_d(&m, &sv(&[1.0, 0.0]), &zero, &sv(&[0.0, -1.0 / 3.0]), &grid).unwrap();
        assert!((psi.row(0)[1] + 1.0 / 3.0).abs() < 1e-15);
        assert!(psi.last()[1].abs() < 1e-4, "{}", psi.last()[1]);
        assert!(solve_psi_d(&m, &sv(&[1.0, 0.2]), &zero, &zero, &grid).is_err());
    }

    #[test]
    fn l_d_reproduces_parabola() {
        let grid = TimeGrid::new(1e-3, 20.0).unwrap();
        let m = ex1();
        let zero = sv(&[0.0, 0.0]);
        let phi_d = solve_phi_d(&m, &zero, &grid).unwrap();
        for x in [-1.0, -0.5, 0.25, 1.0] {
            let term = compute_l_d(&m, &sv(&[x, 0.0]), &zero, &phi_d, &grid, &opts(20.0)).unwrap();
            assert!((term.value[1] + x * x / 3.0).abs() < 1e-6, "x {x}: {}", term.value[1]);
            assert_eq!(term.value[0], 0.0);
            assert!(term.residual < DEFAULT_TOL);
            assert!(term.tail_bound < 1e-8);
            // psi_d(0) = xi + l_d - phi0
            assert_eq!(term.trajectory.row(0)[0], x);
            assert_eq!(term.trajectory.row(0)[1], term.value[1]);
        }
    }

    #[test]
    fn l_d_trivial_cases() {
        let grid = TimeGrid::new(1e-2, 10.0).unwrap();
        let phi0 = sv(&[0.4, -0.4 * 0.4 / 3.0]);
        let m = ex1();
        let phi_d = solve_phi_d(&m, &phi0, &grid).unwrap();
        let own = compute_l_d(&m, &sv(&[0.4, 0.0]), &phi0, &phi_d, &grid, &opts(10.0)).unwrap();
        assert_eq!(own.value.coords(), &[0.0, phi0[1]]);
        let lin = linear_ex1();
        let phi0 = sv(&[0.3, 0.7]);
        let phi_d = solve_phi_d(&lin, &phi0, &TimeGrid::new(1e-2, 3.0).unwrap()).unwrap();
        for x in [-2.0, 0.5] {
            let t = compute_l_d(&lin, &sv(&[x, 0.0]), &phi0, &phi_d, &TimeGrid::new(1e-2, 3.0).unwrap(), &opts(3.0)).unwrap();
            assert_eq!(t.value.coords(), &[0.0, 0.7]);
        }
    }

    #[test]
    fn phi_1_trivial_cases() {
        let grid = TimeGrid::new(1e-3, 5.0).unwrap();
        let m = ex1();
        let noisy = ou(3, 1e-3, 5.0);
        let quiet = ou_stationary(&noisy.path().zeroed()).unwrap();
        let phi0 = sv(&[1.0, -1.0 / 3.0]);
        let phi_d = solve_phi_d(&m, &phi0, &grid).unwrap();
        assert_eq!(solve_phi_1(&m, &phi_d, &quiet, &grid).unwrap().max_norm(), 0.0);
        let zero_d = solve_phi_d(&m, &sv(&[0.0, 0.0]), &grid).unwrap();
        assert_eq!(solve_phi_1(&m, &zero_d, &noisy, &grid).unwrap().max_norm(), 0.0);
    }

    #[test]
    fn phi_1_matches_eps_finite_difference() {
        // oracle: (phi^eps - phi^0)/eps from direct RK4 runs of the random equation
        let horizon = 3.0;
        let grid = TimeGrid::new(1e-3, horizon).unwrap();
        let m = ex1();
        let noise = ou(8, 1e-3, horizon);
        let phi0 = sv(&[1.0, -1.0 / 3.0]);
        let phi_d = solve_phi_d(&m, &phi0, &grid).unwrap();
        let phi_1 = solve_phi_1(&m, &phi_d, &noise, &grid).unwrap();
        let eps = 1e-3;
        let full = crate::leaf_solver::solve_random_equation(&m, &phi0, eps, &noise, &grid).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..grid.len() {
            for i in 0..2 {
                let fd = (full.row(k)[i] - phi_d.row(k)[i]) / eps;
                worst = worst.max((fd - phi_1.row(k)[i]).abs());
            }
        }
        assert!(worst < 50.0 * eps, "worst {worst}");
        assert!(phi_1.max_norm() > 0.1);
    }

    #[test]
    fn psi_1_forward_trivial_cases() {
        let grid = TimeGrid::new(1e-3, 4.0).unwrap();
        let m = ex1();
        let noisy = ou(5, 1e-3, 20.0);
        let quiet = ou_stationary(&noisy.path().zeroed()).unwrap();
        let zero = sv(&[0.0, 0.0]);
        let mut o = opts(4.0);
        o.execution = Execution::Sequential;
        let state = expand_point(&m, &sv(&[0.6, 0.0]), &zero, &quiet, &o).unwrap();
        let psi = solve_psi_1(&m, &state, &quiet, &zero, &grid).unwrap();
        assert_eq!(psi.max_norm(), 0.0);

        let phi0 = sv(&[0.5, -0.25 / 3.0]);
        let state = expand_point(&m, &sv(&[0.5, 0.0]), &phi0, &noisy, &o).unwrap();
        assert_eq!(state.psi_d.max_norm(), 0.0);
        let psi = solve_psi_1(&m, &state, &noisy, &zero, &grid).unwrap();
        assert_eq!(psi.max_norm(), 0.0);
        assert!(solve_psi_1(&m, &state, &noisy, &sv(&[1.0, 0.0]), &grid).is_err());
    }

    #[test]
    fn psi_1_forward_agrees_with_fixed_point() {
        let m = ex1();
        let noise = ou(12, 1e-3, 20.0);
        let state = expand_point(&m, &sv(&[0.8, 0.0]), &sv(&[0.0, 0.0]), &noise, &opts(20.0)).unwrap();
        let short = TimeGrid::new(1e-3, 2.0).unwrap();
        let mut truncated = state.clone();
        truncated.phi_d = crop(&state.phi_d, short.len());
        truncated.phi_1 = crop(&state.phi_1, short.len());
        truncated.psi_d = crop(&state.psi_d, short.len());
        let forward = solve_psi_1(&m, &truncated, &noise, &state.l_1, &short).unwrap();
        let d = trajectory_distance(&forward, &crop(&state.psi_1, short.len()));
        assert!(d < 1e-2, "{d}");
    }

    fn crop(t: &Trajectory, len: usize) -> Trajectory {
        let mut out = Trajectory::zeros(t.dim(), len);
        for k in 0..len {
            out.row_mut(k).copy_from_slice(t.row(k));
        }
        out
    }

    #[test]
    fn l_1_trivial_cases() {
        let m = ex1();
        let noisy = ou(21, 1e-3, 20.0);
        let quiet = ou_stationary(&noisy.path().zeroed()).unwrap();
        let zero = sv(&[0.0, 0.0]);
        let s = expand_point(&m, &sv(&[0.9, 0.0]), &zero, &quiet, &opts(20.0)).unwrap();
        assert_eq!(s.l_1.norm(), 0.0);
        let s = expand_point(&m, &zero, &zero, &noisy, &opts(20.0)).unwrap();
        assert_eq!(s.l_1.norm(), 0.0);
        assert_eq!(s.psi_1.row(0)[0], 0.0);
    }

    #[test]
    fn l_1_matches_closed_form() {
        let m = ex1();
        let dt = 1e-3;
        for seed in [1, 2, 3] {
            let noise = ou(seed, dt, 20.0);
            let x = 0.9;
            let s = expand_point(&m, &sv(&[x, 0.0]), &sv(&[0.0, 0.0]), &noise, &opts(20.0)).unwrap();
            let ito = ito_integral(noise.path(), |t| (-3.0 * t).exp(), 0.0, 20.0).unwrap();
            let expected = -(x * x / 3.0) * (noise.z0() + ito);
            assert!((s.l_1[1] - expected).abs() < 10.0 * dt, "seed {seed}: {} vs {expected}", s.l_1[1]);
            let alt = l_1_integral_form(&m, &s, &noise).unwrap();
            assert!((alt[1] - s.l_1[1]).abs() < 10.0 * dt, "{} vs {}", alt[1], s.l_1[1]);
        }
    }

    #[test]
    fn order_zero_is_noise_independent() {
        let m = ex1();
        let a = expand_point(&m, &sv(&[0.7, 0.0]), &sv(&[0.0, 0.0]), &ou(1, 1e-2, 20.0), &opts(20.0)).unwrap();
        let b = expand_point(&m, &sv(&[0.7, 0.0]), &sv(&[0.0, 0.0]), &ou(2, 1e-2, 20.0), &opts(20.0)).unwrap();
        assert_eq!(a.psi_d, b.psi_d);
        assert_eq!(a.phi_d, b.phi_d);
        assert_eq!(a.l_d, b.l_d);
        assert_ne!(a.l_1, b.l_1);
    }

    #[test]
    fn l_1_is_linear_in_the_noise() {
        let m = ex1();
        let noise = ou(31, 1e-3, 20.0);
        let zero = sv(&[0.0, 0.0]);
        let xi = sv(&[0.75, 0.0]);
        let base = expand_point(&m, &xi, &zero, &noise, &opts(20.0)).unwrap();
        for c in [2.0, -1.0] {
            let scaled = ou_stationary(&noise.path().scaled(c)).unwrap();
            let s = expand_point(&m, &xi, &zero, &scaled, &opts(20.0)).unwrap();
            assert!((s.l_1[1] - c * base.l_1[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn forcing_terms_match_finite_difference_assembly() {
        // lambda~ + F_u psi_1 - Z psi_d and B~ + F_u phi_1 - Z phi_d are the
        // eps-derivatives of G(eps Z, .) differences; compare with central differences
        let models = [ex1(), example2_model(6, 1.0).unwrap()];
        let g = |m: &ModelSpec, z: f64, u: &[f64]| -> Vec<f64> {
            let scaled: Vec<f64> = u.iter().map(|x| x * z.exp()).collect();
            let mut out = vec![0.0; u.len()];
            m.field().eval(&scaled, &mut out);
            out.iter().map(|x| x * (-z).exp()).collect()
        };
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for m in &models {
            let n = m.dim();
            for _ in 0..20 {
                let mut r = || -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.4..0.4)).collect() };
                let (psi_d, phi_d, phi_1, psi_1) = (r(), r(), r(), r());
                let z = 0.7;
                let h = 1e-4;
                let eval = |e: f64| -> Vec<f64> {
                    let psi: Vec<f64> = (0..n).map(|i| psi_d[i] + e * psi_1[i]).collect();
                    let phi: Vec<f64> = (0..n).map(|i| phi_d[i] + e * phi_1[i]).collect();
                    let tot: Vec<f64> = (0..n).map(|i| psi[i] + phi[i]).collect();
                    let a = g(m, e * z, &tot);
                    let b = g(m, e * z, &phi);
                    (0..n).map(|i| e * z * psi[i] + a[i] - b[i]).collect()
                };
                let (p, q) = (eval(h), eval(-h));
                let fd: Vec<f64> = (0..n).map(|i| (p[i] - q[i]) / (2.0 * h)).collect();
                let mut lam = vec![0.0; n];
                lambda_tilde(m, z, &psi_d, &phi_d, &phi_1, &mut lam);
                let tot: Vec<f64> = (0..n).map(|i| psi_d[i] + phi_d[i]).collect();
                let mut fu = vec![0.0; n];
                m.field().derivative(&tot, &psi_1, &mut fu);
                for i in 0..n {
                    assert!((lam[i] + fu[i] - fd[i]).abs() < 1e-6, "{} {i}", m.name());
                }

                let eval_b = |e: f64| -> Vec<f64> {
                    let phi: Vec<f64> = (0..n).map(|i| phi_d[i] + e * phi_1[i]).collect();
                    let b = g(m, e * z, &phi);
                    (0..n).map(|i| e * z * phi[i] + b[i]).collect()
                };
                let (p, q) = (eval_b(h), eval_b(-h));
                let mut b = vec![0.0; n];
                b_tilde(m, z, &phi_d, &mut b);
                let mut fu = vec![0.0; n];
                m.field().derivative(&phi_d, &phi_1, &mut fu);
                for i in 0..n {
                    let fd = (p[i] - q[i]) / (2.0 * h);
                    assert!((b[i] + fu[i] - fd).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn assemble_leaf_examples() {
        let m = ex1();
        let noise = ou(6, 1e-3, 20.0);
        let zero = sv(&[0.0, 0.0]);
        let xs: Vec<StateVector> = (-4..=4).map(|k| sv(&[k as f64 / 4.0, 0.0])).collect();
        let det = assemble_leaf(&m, &zero, &xs, 0.0, Some(&noise), 1e-3, &opts(20.0)).unwrap();
        for (s, p) in det.samples.iter().zip(det.predicted()) {
            assert_eq!(p, &s.xi + &s.l_d);
        }
        let leaf = assemble_leaf(&m, &zero, &xs, 0.1, Some(&noise), 1e-3, &opts(20.0)).unwrap();
        for (s, p) in leaf.samples.iter().zip(leaf.predicted()) {
            let x = s.xi[0];
            let exact = crate::models::example1_analytic_leaf(x, 0.0, 0.0, 0.1, &noise, 20.0).unwrap();
            assert!((p[1] - exact).abs() < 1e-3, "x {x}: {} vs {exact}", p[1]);
        }
        let centre = &leaf.samples[4];
        assert_eq!(centre.xi, zero);
        assert_eq!(centre.predicted(0.1), zero);
        assert_eq!(leaf.seed, Some(6));
        assert!(assemble_leaf(&m, &zero, &xs, -0.1, Some(&noise), 1e-3, &opts(20.0)).is_err());
    }

    #[test]
    fn leaf_csv_layout() {
        let m = ex1();
        let zero = sv(&[0.0, 0.0]);
        let xs = vec![sv(&[1.0, 0.0])];
        let leaf = assemble_leaf(&m, &zero, &xs, 0.0, None, 1e-3, &opts(20.0)).unwrap();
        let mut buf = Vec::new();
        leaf.write_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "xi_1,l_d_1,l_1_1,leaf_pred_1,leaf_pred_2");
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row[0], 1.0);
        assert_eq!(row[2], 0.0);
        assert!((row[4] + 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_contraction_is_reported() {
        // strong coupling y' = y + 40 y^2 x-free: iteration on the unstable
        // coordinate with a huge quadratic self-interaction diverges
        use crate::models::{polynomial_model, PolyTerm};
        let m = polynomial_model(
            vec![-1.0, 1.0],
            vec![
                PolyTerm { component: 1, coefficient: 50.0, exponents: vec![2, 0] },
                PolyTerm { component: 0, coefficient: 50.0, exponents: vec![0, 2] },
            ],
            None,
        )
        .unwrap();
        let grid = TimeGrid::new(1e-2, 10.0).unwrap();
        let zero = sv(&[0.0, 0.0]);
        let phi_d = solve_phi_d(&m, &zero, &grid).unwrap();
        let o = ExpansionOptions { horizon: 10.0, max_iterations: 50, ..Default::default() };
        let err = compute_l_d(&m, &sv(&[2.0, 0.0]), &zero, &phi_d, &grid, &o).unwrap_err();
        assert!(matches!(err, Error::NoContraction { .. }), "{err:?}");
    }
}
