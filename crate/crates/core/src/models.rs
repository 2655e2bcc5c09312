//! Model definitions: the pair `(A, F)` in eigen-coordinates plus the
//! nonlinearity's Frechet derivative and Lipschitz data.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dichotomy::{norm, DichotomySplit, StateVector};
use crate::error::{Error, Result};
use crate::noise::{ito_integral, OuProcess};

/// Largest slope of the quintic smoothstep used by the radial cut-off.
pub const CUTOFF_SLOPE: f64 = 1.875;

/// A smooth nonlinearity `F: R^N -> R^N` with `F(0) = 0`, `DF(0) = 0`.
pub trait Nonlinearity: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// `out = F(u)`.
    fn eval(&self, u: &[f64], out: &mut [f64]);

    /// `out = DF(u) v`.
    fn derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]);

    /// Upper bounds `(sup |F|, sup |DF|)` over the ball of the given radius.
    fn bounds(&self, radius: f64) -> (f64, f64);

    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct ZeroField {
    dim: usize,
}

impl ZeroField {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Nonlinearity for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn derivative(&self, _u: &[f64], _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn bounds(&self, _radius: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn is_zero(&self) -> bool {
        true
    }
}

/// `F(x, y) = (0, x^2)`.
#[derive(Debug, Clone, Copy)]
pub struct PlanarQuadratic;

impl Nonlinearity for PlanarQuadratic {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = u[0] * u[0];
    }
    fn derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 2.0 * u[0] * v[0];
    }
    fn bounds(&self, radius: f64) -> (f64, f64) {
        (radius * radius, 2.0 * radius)
    }
}

/// One monomial `coefficient * prod_j u_j^{exponents[j]}` added to component `component`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub component: usize,
    pub coefficient: f64,
    pub exponents: Vec<u32>,
}

impl PolyTerm {
    fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    fn value(&self, u: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(u)
            .fold(self.coefficient, |acc, (&p, &x)| acc * x.powi(p as i32))
    }

    fn partial(&self, u: &[f64], j: usize) -> f64 {
        let pj = self.exponents[j];
        if pj == 0 {
            return 0.0;
        }
        self.exponents
            .iter()
            .zip(u)
            .enumerate()
            .fold(self.coefficient * pj as f64, |acc, (i, (&p, &x))| {
                let p = if i == j { p - 1 } else { p };
                acc * x.powi(p as i32)
            })
    }
}

/// Sum of monomials of total degree at least two.
#[derive(Debug, Clone)]
pub struct PolynomialField {
    dim: usize,
    terms: Vec<PolyTerm>,
}

impl PolynomialField {
    pub fn new(dim: usize, terms: Vec<PolyTerm>) -> Result<Self> {
        for t in &terms {
            if t.component >= dim || t.exponents.len() != dim {
                return Err(Error::Config(format!(
                    "polynomial term {t:?} does not fit dimension {dim}"
                )));
            }
            if t.degree() < 2 {
                return Err(Error::Config(format!(
                    "polynomial term {t:?} has degree < 2, violating F(0) = 0 and DF(0) = 0"
                )));
            }
            if !t.coefficient.is_finite() {
                return Err(Error::Config(format!("non-finite coefficient in {t:?}")));
            }
        }
        Ok(Self { dim, terms })
    }
}

impl Nonlinearity for PolynomialField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for t in &self.terms {
            out[t.component] += t.value(u);
        }
    }
    fn derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for t in &self.terms {
            out[t.component] += (0..self.dim).map(|j| t.partial(u, j) * v[j]).sum::<f64>();
        }
    }
    fn bounds(&self, radius: f64) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(f, df), t| {
            let d = t.degree() as i32;
            let c = t.coefficient.abs();
            (f + c * radius.powi(d), df + c * d as f64 * radius.powi(d - 1))
        })
    }
    fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

/// `sin(pi t)` that vanishes exactly at integer `t`.
fn sin_pi(t: f64) -> f64 {
    let r = t.rem_euclid(2.0);
    if r == 0.0 || r == 1.0 {
        0.0
    } else {
        (PI * r).sin()
    }
}

/// Dirichlet sine basis `e_n(x) = sqrt(2) sin(n pi x)` on `[0, 1]`, `n = 1..`.
pub fn sine_mode(n: usize, x: f64) -> f64 {
    std::f64::consts::SQRT_2 * sin_pi(n as f64 * x)
}

/// Field on `[0, 1]` given by its sine-mode coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalerkinField {
    coefficients: Vec<f64>,
}

impl GalerkinField {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("Galerkin coefficients must be finite".into()));
        }
        Ok(Self { coefficients })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(n, a)| a * sine_mode(n + 1, x))
            .sum()
    }
}

/// Galerkin projection of `coefficient * u^3` onto the first `N` sine modes,
/// evaluated pseudo-spectrally on `4N` midpoint nodes. The midpoint rule with
/// `M` nodes integrates `cos(k pi x)` exactly for `k < 2M`, and the products
/// involved here only reach `k = 4N`, so the projection is exact up to rounding.
#[derive(Debug, Clone)]
pub struct GalerkinCubic {
    modes: usize,
    nodes: usize,
    coefficient: f64,
    // basis[n * nodes + j] = e_{n+1}(x_j)
    basis: Vec<f64>,
}

impl GalerkinCubic {
    pub fn new(modes: usize, coefficient: f64) -> Self {
        let nodes = 4 * modes;
        let mut basis = Vec::with_capacity(modes * nodes);
        for n in 1..=modes {
            for j in 0..nodes {
                let x = (j as f64 + 0.5) / nodes as f64;
                basis.push(sine_mode(n, x));
            }
        }
        Self {
            modes,
            nodes,
            coefficient,
            basis,
        }
    }

    fn synthesize(&self, a: &[f64], values: &mut [f64]) {
        values.fill(0.0);
        for (n, an) in a.iter().enumerate() {
            if *an == 0.0 {
                continue;
            }
            let row = &self.basis[n * self.nodes..(n + 1) * self.nodes];
            for (v, b) in values.iter_mut().zip(row) {
                *v += an * b;
            }
        }
    }

    fn project(&self, values: &[f64], out: &mut [f64]) {
        let w = self.coefficient / self.nodes as f64;
        for (n, o) in out.iter_mut().enumerate() {
            let row = &self.basis[n * self.nodes..(n + 1) * self.nodes];
            *o = w * row.iter().zip(values).map(|(b, v)| b * v).sum::<f64>();
        }
    }
}

impl Nonlinearity for GalerkinCubic {
    fn dim(&self) -> usize {
        self.modes
    }
    fn eval(&self, u: &[f64], out: &mut [f64]) {
        let mut values = vec![0.0; self.nodes];
        self.synthesize(u, &mut values);
        for v in values.iter_mut() {
            *v = *v * *v * *v;
        }
        self.project(&values, out);
    }
    fn derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        let mut uu = vec![0.0; self.nodes];
        let mut vv = vec![0.0; self.nodes];
        self.synthesize(u, &mut uu);
        self.synthesize(v, &mut vv);
        for (a, b) in uu.iter_mut().zip(&vv) {
            *a = 3.0 * *a * *a * b;
        }
        self.project(&uu, out);
    }
    fn bounds(&self, radius: f64) -> (f64, f64) {
        // |u|_inf <= sqrt(2N) |a|
        let sup2 = 2.0 * self.modes as f64 * radius * radius;
        let c = self.coefficient.abs();
        (c * sup2 * radius, 3.0 * c * sup2)
    }
}

/// Quintic smoothstep taper: 1 on `[0, 1]`, 0 on `[2, inf)`, C^2 and monotone.
pub fn taper(s: f64) -> f64 {
    if s <= 1.0 {
        1.0
    } else if s >= 2.0 {
        0.0
    } else {
        let x = s - 1.0;
        1.0 - x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
    }
}

pub fn taper_slope(s: f64) -> f64 {
    if s <= 1.0 || s >= 2.0 {
        0.0
    } else {
        let x = s - 1.0;
        -30.0 * x * x * (1.0 - x) * (1.0 - x)
    }
}

/// `chi(|u| / rho) F(u)`: globally Lipschitz, unchanged inside the ball of radius `rho`.
#[derive(Debug, Clone)]
pub struct CutOff<N> {
    inner: N,
    radius: f64,
}

impl<N: Nonlinearity> CutOff<N> {
    pub fn new(inner: N, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Config(format!("cut-off radius must be positive, got {radius}")));
        }
        Ok(Self { inner, radius })
    }

    /// Global Lipschitz bound `sup |DF| + sup |F| * max|chi'| / rho` over the ball `2 rho`.
    pub fn lipschitz(&self) -> f64 {
        let (f, df) = self.inner.bounds(2.0 * self.radius);
        df + f * CUTOFF_SLOPE / self.radius
    }
}

impl<N: Nonlinearity> Nonlinearity for CutOff<N> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, u: &[f64], out: &mut [f64]) {
        let s = norm(u) / self.radius;
        if s >= 2.0 {
            out.fill(0.0);
            return;
        }
        self.inner.eval(u, out);
        let chi = taper(s);
        if chi != 1.0 {
            out.iter_mut().for_each(|o| *o *= chi);
        }
    }
    fn derivative(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        let r = norm(u);
        let s = r / self.radius;
        if s >= 2.0 {
            out.fill(0.0);
            return;
        }
        self.inner.derivative(u, v, out);
        if s <= 1.0 {
            return;
        }
        let chi = taper(s);
        let ds = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (r * self.radius);
        let scale = taper_slope(s) * ds;
        let mut f = vec![0.0; u.len()];
        self.inner.eval(u, &mut f);
        for (o, fi) in out.iter_mut().zip(&f) {
            *o = chi * *o + scale * fi;
        }
    }
    fn bounds(&self, radius: f64) -> (f64, f64) {
        let (f, _) = self.inner.bounds(radius.min(2.0 * self.radius));
        (f, self.lipschitz())
    }
    fn is_zero(&self) -> bool {
        self.inner.is_zero()
    }
}

/// The pair `(A, F)` together with the Lipschitz data the gap condition uses.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    split: DichotomySplit,
    field: Arc<dyn Nonlinearity>,
    lipschitz: f64,
    cutoff_radius: Option<f64>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("eigenvalues", &self.split.eigenvalues())
            .field("lipschitz", &self.lipschitz)
            .field("cutoff_radius", &self.cutoff_radius)
            .finish()
    }
}

impl ModelSpec {
    /// Model without cut-off. The Lipschitz constant is 0 for a vanishing
    /// field and infinite otherwise, until overridden.
    pub fn new(name: impl Into<String>, split: DichotomySplit, field: Arc<dyn Nonlinearity>) -> Result<Self> {
        if field.dim() != split.dim() {
            return Err(Error::Dimension {
                expected: split.dim(),
                found: field.dim(),
            });
        }
        let lipschitz = if field.is_zero() { 0.0 } else { f64::INFINITY };
        Ok(Self {
            name: name.into(),
            split,
            field,
            lipschitz,
            cutoff_radius: None,
        })
    }

    /// Model with `F` replaced by its radial cut-off at `radius`.
    pub fn with_cutoff<N: Nonlinearity + 'static>(
        name: impl Into<String>,
        split: DichotomySplit,
        field: N,
        radius: f64,
    ) -> Result<Self> {
        let cut = CutOff::new(field, radius)?;
        let lipschitz = cut.lipschitz();
        let mut model = Self::new(name, split, Arc::new(cut))?;
        model.lipschitz = lipschitz;
        model.cutoff_radius = Some(radius);
        Ok(model)
    }

    pub fn with_lipschitz(mut self, lipschitz: f64) -> Result<Self> {
        if !(lipschitz >= 0.0) {
            return Err(Error::Config(format!("Lipschitz constant must be >= 0, got {lipschitz}")));
        }
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn with_split(mut self, split: DichotomySplit) -> Result<Self> {
        if split.dim() != self.split.dim() {
            return Err(Error::Dimension {
                expected: self.split.dim(),
                found: split.dim(),
            });
        }
        self.split = split;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.split.dim()
    }

    pub fn split(&self) -> &DichotomySplit {
        &self.split
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn cutoff_radius(&self) -> Option<f64> {
        self.cutoff_radius
    }

    pub fn field(&self) -> &dyn Nonlinearity {
        self.field.as_ref()
    }

    pub fn is_linear(&self) -> bool {
        self.field.is_zero()
    }

    pub fn f(&self, u: &StateVector) -> StateVector {
        let mut out = vec![0.0; self.dim()];
        self.field.eval(u.coords(), &mut out);
        StateVector::new(out)
    }

    pub fn f_derivative(&self, base: &StateVector, direction: &StateVector) -> StateVector {
        let mut out = vec![0.0; self.dim()];
        self.field.derivative(base.coords(), direction.coords(), &mut out);
        StateVector::new(out)
    }

    /// Norm above which solutions are declared to have blown up.
    pub fn blow_up_limit(&self) -> f64 {
        self.cutoff_radius.map_or(f64::INFINITY, |r| 10.0 * r)
    }

    /// Same model with the nonlinearity removed (`F = 0`).
    pub fn linear_part(&self) -> Self {
        Self {
            name: format!("{}-linear", self.name),
            split: self.split.clone(),
            field: Arc::new(ZeroField::new(self.dim())),
            lipschitz: 0.0,
            cutoff_radius: self.cutoff_radius,
        }
    }
}

pub const EXAMPLE1_CUTOFF: f64 = 2.0;
pub const EXAMPLE2_MODES: usize = 8;
pub const EXAMPLE2_CUTOFF: f64 = 1.0;

/// `dx = -x dt + eps x o dW`, `dy = (y + x^2) dt + eps y o dW` with the quadratic
/// term cut off outside `|u| = rho`.
pub fn example1_model(cutoff_radius: f64) -> Result<ModelSpec> {
    let split = DichotomySplit::from_eigenvalues(vec![-1.0, 1.0])?;
    ModelSpec::with_cutoff("example1", split, PlanarQuadratic, cutoff_radius)
}

/// First-order closed form of the Example 1 stable leaf through `(x0, y0)`:
/// `y0 - (x^2 - x0^2)/3 (1 + eps Z(w) + eps int_0^horizon e^{-3 tau} dW)`.
pub fn example1_analytic_leaf(
    x: f64,
    x0: f64,
    y0: f64,
    eps: f64,
    ou: &OuProcess,
    horizon: f64,
) -> Result<f64> {
    let shape = (x * x - x0 * x0) / 3.0;
    let noise = ito_integral(ou.path(), |t| (-3.0 * t).exp(), 0.0, horizon)?;
    Ok(y0 - shape - eps * shape * ou.z0() - eps * shape * noise)
}

/// Eigenvalues `10 - (n pi)^2` of `d^2/dx^2 + 10` with Dirichlet conditions.
pub fn example2_eigenvalues(modes: usize) -> Vec<f64> {
    (1..=modes).map(|n| 10.0 - (n as f64 * PI).powi(2)).collect()
}

/// Galerkin truncation of `U_t = U_xx + 10 U - U^3` on `N` sine modes.
pub fn example2_model(modes: usize, cutoff_radius: f64) -> Result<ModelSpec> {
    if modes < 2 {
        return Err(Error::Config(format!(
            "example2 needs at least 2 modes, got {modes}"
        )));
    }
    let split = DichotomySplit::from_eigenvalues(example2_eigenvalues(modes))?;
    ModelSpec::with_cutoff("example2", split, GalerkinCubic::new(modes, -1.0), cutoff_radius)
}

/// Inline model: diagonal `A` with the given eigenvalues and a polynomial `F`.
pub fn polynomial_model(
    eigenvalues: Vec<f64>,
    terms: Vec<PolyTerm>,
    cutoff_radius: Option<f64>,
) -> Result<ModelSpec> {
    let split = DichotomySplit::from_eigenvalues(eigenvalues)?;
    let field = PolynomialField::new(split.dim(), terms)?;
    match cutoff_radius {
        Some(r) => ModelSpec::with_cutoff("inline", split, field, r),
        None => ModelSpec::new("inline", split, Arc::new(field)),
    }
}
