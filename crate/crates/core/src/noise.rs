//! Seeded scalar Wiener paths and the Wiener functionals built on them.
//!
//! A [`BrownianPath`] lives on one uniform grid covering `[t_min, t_max]` with
//! `W(0) = 0`. The forward and backward halves are drawn from two independent
//! ChaCha streams of the same seed, so extending either end of the grid leaves
//! the other half untouched.
//!
//! [`OuProcess`] caches the stationary Ornstein-Uhlenbeck process
//! `Z(theta_t w) = int_{-inf}^t e^{tau - t} dW(tau)` on the same grid. The
//! improper integral is truncated at `t_min`, so the tail error is bounded by
//! `e^{t_min}` in standard deviation.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{whole_steps, TimeGrid};

pub const DEFAULT_T_MIN: f64 = -20.0;
pub const DEFAULT_TAIL_TOL: f64 = 1e-8;

const FORWARD_STREAM: u64 = 0;
const BACKWARD_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    seed: u64,
    t_min: f64,
    dt: f64,
    origin: usize,
    values: Vec<f64>,
}

impl BrownianPath {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.time(self.values.len() - 1)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Index of `t = 0`.
    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, index: usize) -> f64 {
        (index as f64 - self.origin as f64) * self.dt
    }

    /// Grid index of time `t`, which must be a grid point inside the support.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let out_of_range = || Error::OutOfRange {
            t,
            t_min: self.t_min,
            t_max: self.t_max(),
        };
        let offset = t / self.dt + self.origin as f64;
        let rounded = offset.round();
        if rounded < 0.0 || rounded as usize >= self.values.len() {
            return Err(out_of_range());
        }
        if (offset - rounded).abs() > crate::grid::ALIGN_TOL * rounded.abs().max(1.0) {
            return Err(Error::Config(format!(
                "time {t} is not on the path grid (dt = {})",
                self.dt
            )));
        }
        Ok(rounded as usize)
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        Ok(self.values[self.index_of(t)?])
    }

    /// Builds a path from explicit grid values. `values[origin]` must be zero.
    pub fn from_values(t_min: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if !(t_min <= 0.0) {
            return Err(Error::Config(format!("t_min must be <= 0, got {t_min}")));
        }
        let origin = whole_steps(-t_min, dt)
            .ok_or_else(|| Error::Config(format!("t_min {t_min} is not a multiple of dt {dt}")))?;
        if origin >= values.len() || values[origin] != 0.0 {
            return Err(Error::Config("path must contain t = 0 with W(0) = 0".into()));
        }
        Ok(Self {
            seed: 0,
            t_min,
            dt,
            origin,
            values,
        })
    }

    /// The path `c W` on the same grid.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|w| c * w).collect(),
            ..self.clone()
        }
    }

    /// Identically zero path on the same grid.
    pub fn zeroed(&self) -> Self {
        self.scaled(0.0)
    }

    fn increment(&self, k: usize) -> f64 {
        self.values[k + 1] - self.values[k]
    }
}

/// Seeded path on `[t_min, t_max]`: `W(0) = 0`, independent `N(0, dt)` increments
/// running forward from 0 to `t_max` and backward from 0 to `t_min`.
pub fn generate_brownian_path(seed: u64, t_min: f64, t_max: f64, dt: f64) -> Result<BrownianPath> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    if !(t_min < 0.0 && t_max > 0.0) {
        return Err(Error::Config(format!(
            "need t_min < 0 < t_max, got [{t_min}, {t_max}]"
        )));
    }
    let misaligned = |what: &str, v: f64| {
        Error::Config(format!("{what} = {v} is not a whole number of steps dt = {dt}"))
    };
    let backward = whole_steps(-t_min, dt).ok_or_else(|| misaligned("t_min", t_min))?;
    let forward = whole_steps(t_max, dt).ok_or_else(|| misaligned("t_max", t_max))?;

    let scale = dt.sqrt();
    let mut values = vec![0.0; backward + forward + 1];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(FORWARD_STREAM);
    let mut w = 0.0;
    for v in values[backward + 1..].iter_mut() {
        let xi: f64 = StandardNormal.sample(&mut rng);
        w += scale * xi;
        *v = w;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BACKWARD_STREAM);
    let mut w = 0.0;
    for v in values[..backward].iter_mut().rev() {
        let xi: f64 = StandardNormal.sample(&mut rng);
        w += scale * xi;
        *v = w;
    }

    Ok(BrownianPath {
        seed,
        t_min: -(backward as f64) * dt,
        dt,
        origin: backward,
        values,
    })
}

/// Stationary OU process `dZ = -Z dt + dW` sampled on the path grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OuProcess {
    path: BrownianPath,
    z: Vec<f64>,
    // trapezoidal running integral of z from t = 0 (negative for t < 0)
    cumulative: Vec<f64>,
}

/// `ou_stationary_with_tol` with the default tail tolerance.
pub fn ou_stationary(path: &BrownianPath) -> Result<OuProcess> {
    ou_stationary_with_tol(path, DEFAULT_TAIL_TOL)
}

/// Computes `Z(w) = int_{t_min}^0 e^tau dW(tau)` as a left-point Ito sum and
/// the shifted values `Z(theta_t w)` on the whole grid through the exact
/// one-step recursion `Z_{k+1} = e^{-dt} (Z_k + dW_k)` started from zero at `t_min`.
pub fn ou_stationary_with_tol(path: &BrownianPath, tail_tol: f64) -> Result<OuProcess> {
    let tail = path.t_min.exp();
    if tail > tail_tol {
        return Err(Error::Truncation {
            t_min: path.t_min,
            tail,
            tol: tail_tol,
            required_t_min: tail_tol.ln(),
        });
    }
    let decay = (-path.dt).exp();
    let mut z = Vec::with_capacity(path.len());
    let mut current = 0.0;
    z.push(current);
    for k in 0..path.len() - 1 {
        current = decay * (current + path.increment(k));
        z.push(current);
    }

    let origin = path.origin;
    let half_dt = 0.5 * path.dt;
    let mut cumulative = vec![0.0; z.len()];
    for k in origin + 1..z.len() {
        cumulative[k] = cumulative[k - 1] + half_dt * (z[k - 1] + z[k]);
    }
    for k in (0..origin).rev() {
        cumulative[k] = cumulative[k + 1] - half_dt * (z[k] + z[k + 1]);
    }

    Ok(OuProcess {
        path: path.clone(),
        z,
        cumulative,
    })
}

impl OuProcess {
    pub fn path(&self) -> &BrownianPath {
        &self.path
    }

    pub fn seed(&self) -> u64 {
        self.path.seed
    }

    /// `Z(w)`, the stationary value at time zero.
    pub fn z0(&self) -> f64 {
        self.z[self.path.origin]
    }

    /// `Z(theta_t w)` for a grid time `t`.
    pub fn z_at(&self, t: f64) -> Result<f64> {
        Ok(self.z[self.path.index_of(t)?])
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    /// `Z(theta_{t_k} w)` at the points of a forward grid starting at `t = 0`.
    pub fn forward(&self, grid: &TimeGrid) -> Result<&[f64]> {
        let (start, end) = self.forward_range(grid)?;
        Ok(&self.z[start..end])
    }

    /// `int_0^{t_k} Z(theta_tau w) dtau` at the points of a forward grid.
    pub fn forward_integral(&self, grid: &TimeGrid) -> Result<&[f64]> {
        let (start, end) = self.forward_range(grid)?;
        Ok(&self.cumulative[start..end])
    }

    fn forward_range(&self, grid: &TimeGrid) -> Result<(usize, usize)> {
        if (grid.dt - self.path.dt).abs() > crate::grid::ALIGN_TOL * self.path.dt {
            return Err(Error::Config(format!(
                "solver grid dt = {} differs from the noise grid dt = {}",
                grid.dt, self.path.dt
            )));
        }
        let start = self.path.origin;
        let end = start + grid.len();
        if end > self.z.len() {
            return Err(Error::OutOfRange {
                t: grid.horizon(),
                t_min: self.path.t_min,
                t_max: self.path.t_max(),
            });
        }
        Ok((start, end))
    }

    fn cumulative_at(&self, t: f64) -> Result<f64> {
        let p = &self.path;
        if t < p.t_min - 1e-12 || t > p.t_max() + 1e-12 {
            return Err(Error::OutOfRange {
                t,
                t_min: p.t_min,
                t_max: p.t_max(),
            });
        }
        let pos = ((t - p.t_min) / p.dt).clamp(0.0, (p.len() - 1) as f64);
        let k = (pos.floor() as usize).min(p.len() - 2);
        let frac = (pos - k as f64) * p.dt;
        let slope = (self.z[k + 1] - self.z[k]) / p.dt;
        // exact integral of the linear interpolant on the partial cell
        Ok(self.cumulative[k] + frac * (self.z[k] + 0.5 * slope * frac))
    }
}

/// `int_{t0}^{t1} Z(theta_tau w) dtau` by the trapezoidal rule on the cached values
/// (exact for the piecewise-linear interpolant between grid points).
pub fn integral_z(ou: &OuProcess, t0: f64, t1: f64) -> Result<f64> {
    if t1 < t0 {
        return Err(Error::Config(format!("integral_z needs t0 <= t1, got [{t0}, {t1}]")));
    }
    if t0 == t1 {
        // still validate the point
        ou.cumulative_at(t0)?;
        return Ok(0.0);
    }
    Ok(ou.cumulative_at(t1)? - ou.cumulative_at(t0)?)
}

/// Left-point Ito sum `sum_k f(t_k) (W(t_{k+1}) - W(t_k))` over grid points in `[t0, t1]`.
pub fn ito_integral<F>(path: &BrownianPath, integrand: F, t0: f64, t1: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if t1 < t0 {
        return Err(Error::Config(format!("ito_integral needs t0 <= t1, got [{t0}, {t1}]")));
    }
    let i0 = path.index_of(t0)?;
    let i1 = path.index_of(t1)?;
    let mut sum = 0.0;
    for k in i0..i1 {
        let f = integrand(path.time(k));
        if !f.is_finite() {
            return Err(Error::Domain(format!(
                "integrand is not finite at t = {}",
                path.time(k)
            )));
        }
        sum += f * path.increment(k);
    }
    Ok(sum)
}

/// Writes `t,W,Z` rows with 17 significant digits.
pub fn write_path_csv<W: Write>(ou: &OuProcess, mut out: W) -> Result<()> {
    writeln!(out, "t,W,Z")?;
    for (k, (w, z)) in ou.path.values.iter().zip(&ou.z).enumerate() {
        writeln!(
            out,
            "{},{},{}",
            crate::experiments::output::fmt17(ou.path.time(k)),
            crate::experiments::output::fmt17(*w),
            crate::experiments::output::fmt17(*z)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_variance(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        // standard error of the sample variance
        let se = ((m4 - var * var) / n).sqrt();
        (var, se)
    }

    #[test]
    fn origin_is_pinned() {
        for seed in [0, 1, 7, 12345] {
            let p = generate_brownian_path(seed, -2.0, 3.0, 0.01).unwrap();
            assert_eq!(p.at(0.0).unwrap(), 0.0);
            assert_eq!(p.len(), 501);
        }
    }

    #[test]
    fn same_seed_same_path() {
        let a = generate_brownian_path(42, -1.0, 1.0, 1e-3).unwrap();
        let b = generate_brownian_path(42, -1.0, 1.0, 1e-3).unwrap();
        assert_eq!(a.values(), b.values());
        let c = generate_brownian_path(43, -1.0, 1.0, 1e-3).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn forward_half_independent_of_t_min() {
        let a = generate_brownian_path(9, -1.0, 2.0, 0.01).unwrap();
        let b = generate_brownian_path(9, -5.0, 2.0, 0.01).unwrap();
        assert_eq!(a.at(2.0).unwrap(), b.at(2.0).unwrap());
        assert_eq!(a.at(-1.0).unwrap(), b.at(-1.0).unwrap());
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(
            generate_brownian_path(1, -1.0, 1.0, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_brownian_path(1, -1.0, 1.0, -0.1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_brownian_path(1, -1.0, 1.05, 0.1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_brownian_path(1, 0.0, 1.0, 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn variance_of_w1() {
        let samples: Vec<f64> = (0..10_000u64)
            .map(|s| {
                generate_brownian_path(s, -1e-3, 1.0, 1e-3)
                    .unwrap()
                    .at(1.0)
                    .unwrap()
            })
            .collect();
        let (var, se) = sample_variance(&samples);
        assert!((var - 1.0).abs() < 3.0 * se, "var {var} se {se}");
    }

    #[test]
    fn zero_path_gives_zero_ou() {
        let p = generate_brownian_path(3, -20.0, 2.0, 0.01).unwrap().zeroed();
        let ou = ou_stationary(&p).unwrap();
        assert_eq!(ou.z0(), 0.0);
        assert!(ou.values().iter().all(|&z| z == 0.0));
        assert_eq!(integral_z(&ou, 0.0, 1.5).unwrap(), 0.0);
        assert_eq!(integral_z(&ou, -3.0, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn truncation_is_reported() {
        let p = generate_brownian_path(3, -5.0, 1.0, 0.01).unwrap();
        match ou_stationary(&p) {
            Err(Error::Truncation { required_t_min, .. }) => {
                assert!((required_t_min - DEFAULT_TAIL_TOL.ln()).abs() < 1e-12)
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        assert!(ou_stationary_with_tol(&p, 1e-2).is_ok());
    }

    #[test]
    fn z0_variance_is_one_half() {
        let samples: Vec<f64> = (0..10_000u64)
            .map(|s| {
                let p = generate_brownian_path(s, -20.0, 1e-2, 1e-2).unwrap();
                ou_stationary(&p).unwrap().z0()
            })
            .collect();
        let (var, se) = sample_variance(&samples);
        assert!((var - 0.5).abs() < 3.0 * se, "var {var} se {se}");
    }

    #[test]
    fn shift_identity_against_direct_definition() {
        let dt = 1e-3;
        for seed in [1, 2, 3] {
            let p = generate_brownian_path(seed, -20.0, 2.0, dt).unwrap();
            let ou = ou_stationary(&p).unwrap();
            // Z(theta_1 w) from its definition int_{-inf}^1 e^{s-1} dW(s)
            let direct = ito_integral(&p, |s| (s - 1.0).exp(), -20.0, 1.0).unwrap();
            // e^{-1} Z(w) + e^{-1} int_0^1 e^tau dW
            let shifted = (-1.0f64).exp() * ou.z0()
                + (-1.0f64).exp() * ito_integral(&p, f64::exp, 0.0, 1.0).unwrap();
            let cached = ou.z_at(1.0).unwrap();
            assert!((direct - shifted).abs() <= 10.0 * dt);
            assert!((cached - shifted).abs() <= 10.0 * dt, "{cached} vs {shifted}");
        }
    }

    #[test]
    fn integral_z_edge_cases() {
        let p = generate_brownian_path(5, -20.0, 2.0, 1e-2).unwrap();
        let ou = ou_stationary(&p).unwrap();
        assert_eq!(integral_z(&ou, 0.7, 0.7).unwrap(), 0.0);
        assert!(matches!(
            integral_z(&ou, 0.0, 3.0),
            Err(Error::OutOfRange { .. })
        ));
        let whole = integral_z(&ou, 0.0, 2.0).unwrap();
        let split = integral_z(&ou, 0.0, 0.505).unwrap() + integral_z(&ou, 0.505, 2.0).unwrap();
        assert!((whole - split).abs() < 1e-12);
    }

    #[test]
    fn ito_integral_trivial_integrands() {
        let p = generate_brownian_path(11, -1.0, 2.0, 1e-3).unwrap();
        let telescoped = ito_integral(&p, |_| 1.0, -0.5, 1.5).unwrap();
        let expected = p.at(1.5).unwrap() - p.at(-0.5).unwrap();
        assert!((telescoped - expected).abs() < 1e-12);
        assert_eq!(ito_integral(&p, |_| 0.0, 0.0, 2.0).unwrap(), 0.0);
        assert!(ito_integral(&p, |_| 1.0, 0.0, 2.5).is_err());
    }

    #[test]
    fn ito_isometry_exponential_kernels() {
        for a in [1.0, 3.0] {
            let samples: Vec<f64> = (0..10_000u64)
                .map(|s| {
                    let p = generate_brownian_path(s, -1e-2, 10.0, 1e-2).unwrap();
                    ito_integral(&p, |t| (-a * t).exp(), 0.0, 10.0).unwrap()
                })
                .collect();
            let (var, se) = sample_variance(&samples);
            // left-point sums carry an O(dt) bias: dt / (1 - e^{-2 a dt})
            assert!((var - 0.5 / a).abs() < 3.0 * se, "a {a}: var {var} se {se}");
        }
    }

    #[test]
    fn path_csv_has_header_and_rows() {
        let p = generate_brownian_path(1, -20.0, 0.5, 0.25).unwrap();
        let ou = ou_stationary(&p).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&ou, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,W,Z");
        assert_eq!(lines.len(), p.len() + 1);
        let origin: Vec<f64> = lines[1 + p.origin()]
            .split(',')
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(origin[0], 0.0);
        assert_eq!(origin[1], 0.0);
        assert_eq!(origin[2], ou.z0());
    }
}
