//! Diagonal linear part with its stable/unstable splitting.
//!
//! States are stored in the eigenbasis of `A`, so `e^{At}` acts coordinatewise,
//! the projections zero out coordinates and the dichotomy bound is `K = 1`.

use std::ops::{Add, Index, IndexMut, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable coordinates of a vector passed to negative-time `e^{At}` must vanish to this level.
pub const BACKWARD_TOL: f64 = 1e-12;

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Element of the (truncated) phase space in eigen-coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(self.0.iter().map(|x| c * x).collect())
    }

    pub fn axpy(&self, c: f64, other: &StateVector) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + c * b).collect())
    }

    pub fn distance(&self, other: &StateVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for StateVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for &StateVector {
    type Output = StateVector;
    fn add(self, rhs: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &StateVector {
    type Output = StateVector;
    fn sub(self, rhs: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

/// Eigenvalues of `A` split by sign, with dichotomy exponents `alpha > 0 > beta` and bound `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomySplit {
    eigenvalues: Vec<f64>,
    stable: Vec<usize>,
    unstable: Vec<usize>,
    alpha: f64,
    beta: f64,
    bound_k: f64,
}

impl DichotomySplit {
    /// Sharpest constants for a diagonal operator: `alpha` is the smallest
    /// unstable eigenvalue, `beta` the largest stable one, `K = 1`.
    pub fn from_eigenvalues(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Config("operator needs at least one eigenvalue".into()));
        }
        if let Some(bad) = eigenvalues.iter().find(|l| !l.is_finite() || **l == 0.0) {
            return Err(Error::Config(format!(
                "eigenvalue {bad} is not admissible: a dichotomy needs nonzero finite eigenvalues"
            )));
        }
        let stable: Vec<usize> = (0..eigenvalues.len()).filter(|&i| eigenvalues[i] < 0.0).collect();
        let unstable: Vec<usize> = (0..eigenvalues.len()).filter(|&i| eigenvalues[i] > 0.0).collect();
        let alpha = unstable
            .iter()
            .map(|&i| eigenvalues[i])
            .fold(f64::INFINITY, f64::min);
        let beta = stable
            .iter()
            .map(|&i| eigenvalues[i])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            eigenvalues,
            stable,
            unstable,
            alpha,
            beta,
            bound_k: 1.0,
        })
    }

    /// Overrides the exponents and bound. They must still dominate the spectrum.
    pub fn with_constants(mut self, alpha: f64, beta: f64, bound_k: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta < 0.0 && bound_k >= 1.0) {
            return Err(Error::Config(format!(
                "need alpha > 0 > beta and K >= 1, got alpha {alpha}, beta {beta}, K {bound_k}"
            )));
        }
        if self.unstable.iter().any(|&i| self.eigenvalues[i] < alpha)
            || self.stable.iter().any(|&i| self.eigenvalues[i] > beta)
        {
            return Err(Error::Config(format!(
                "exponents alpha {alpha}, beta {beta} do not bound the spectrum {:?}",
                self.eigenvalues
            )));
        }
        self.alpha = alpha;
        self.beta = beta;
        self.bound_k = bound_k;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn stable_set(&self) -> &[usize] {
        &self.stable
    }

    pub fn unstable_set(&self) -> &[usize] {
        &self.unstable
    }

    /// Smallest unstable growth rate; `+inf` when there is no unstable direction.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Largest stable decay rate; `-inf` when there is no stable direction.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn bound_k(&self) -> f64 {
        self.bound_k
    }

    pub fn is_unstable(&self, i: usize) -> bool {
        self.eigenvalues[i] > 0.0
    }

    fn check_dim(&self, v: &StateVector) -> Result<()> {
        if v.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: v.dim(),
            });
        }
        Ok(())
    }

    /// Embeds stable coordinates (ordered as `stable_set`) into a full vector.
    pub fn embed_stable(&self, coords: &[f64]) -> Result<StateVector> {
        if coords.len() != self.stable.len() {
            return Err(Error::Dimension {
                expected: self.stable.len(),
                found: coords.len(),
            });
        }
        let mut v = StateVector::zeros(self.dim());
        for (&i, c) in self.stable.iter().zip(coords) {
            v[i] = *c;
        }
        Ok(v)
    }

    pub fn stable_coords(&self, v: &StateVector) -> Vec<f64> {
        self.stable.iter().map(|&i| v[i]).collect()
    }

    pub fn unstable_coords(&self, v: &StateVector) -> Vec<f64> {
        self.unstable.iter().map(|&i| v[i]).collect()
    }
}

/// `P^s v`: zeroes the unstable coordinates.
pub fn project_stable(split: &DichotomySplit, v: &StateVector) -> Result<StateVector> {
    split.check_dim(v)?;
    let mut out = v.clone();
    for &i in &split.unstable {
        out[i] = 0.0;
    }
    Ok(out)
}

/// `P^u v`: zeroes the stable coordinates.
pub fn project_unstable(split: &DichotomySplit, v: &StateVector) -> Result<StateVector> {
    split.check_dim(v)?;
    let mut out = v.clone();
    for &i in &split.stable {
        out[i] = 0.0;
    }
    Ok(out)
}

/// `e^{At} v`. For `t < 0` only the unstable range is admissible.
pub fn semigroup_apply(split: &DichotomySplit, t: f64, v: &StateVector) -> Result<StateVector> {
    split.check_dim(v)?;
    if t < 0.0 {
        if let Some(&i) = split.stable.iter().find(|&&i| v[i].abs() > BACKWARD_TOL) {
            return Err(Error::Domain(format!(
                "e^(At) with t = {t} < 0 is undefined on the stable coordinate {i} (value {})",
                v[i]
            )));
        }
    }
    Ok(StateVector::new(
        v.coords()
            .iter()
            .zip(&split.eigenvalues)
            .map(|(x, l)| {
                if t < 0.0 && *l < 0.0 {
                    0.0
                } else {
                    (l * t).exp() * x
                }
            })
            .collect(),
    ))
}

/// `K L_F (1/(eta - beta) + 1/(alpha - eta))`.
pub fn gap_value(bound_k: f64, lipschitz: f64, alpha: f64, beta: f64, eta: f64) -> f64 {
    bound_k * lipschitz * (1.0 / (eta - beta) + 1.0 / (alpha - eta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub value: f64,
    pub satisfied: bool,
    pub margin: f64,
}

/// Evaluates the gap condition `K L_F (1/(eta-beta) + 1/(alpha-eta)) < 1`.
pub fn check_gap_condition(split: &DichotomySplit, lipschitz: f64, eta: f64) -> Result<GapReport> {
    gap_report(split.bound_k, lipschitz, split.alpha, split.beta, eta)
}

/// [`check_gap_condition`] with explicit constants.
pub fn gap_report(bound_k: f64, lipschitz: f64, alpha: f64, beta: f64, eta: f64) -> Result<GapReport> {
    if !(beta < eta && eta < alpha) {
        return Err(Error::Config(format!(
            "eta = {eta} must lie strictly between beta = {beta} and alpha = {alpha}"
        )));
    }
    if !(lipschitz >= 0.0) {
        return Err(Error::Config(format!(
            "Lipschitz constant must be non-negative, got {lipschitz}"
        )));
    }
    let value = gap_value(bound_k, lipschitz, alpha, beta, eta);
    Ok(GapReport {
        value,
        satisfied: value < 1.0,
        margin: 1.0 - value,
    })
}

/// Weighting exponent `eta` in `(beta, alpha)` maximizing the gap margin, that is
/// minimizing `1/(eta - beta) + 1/(alpha - eta)`. The cost is too flat at its
/// minimum for a direct search to resolve it below `sqrt(f64::EPSILON)`, so the
/// golden-section search runs on the size of its derivative instead.
/// With one infinite exponent the finite side is offset by one.
pub fn auto_eta(split: &DichotomySplit) -> f64 {
    let (alpha, beta) = (split.alpha, split.beta);
    match (alpha.is_finite(), beta.is_finite()) {
        (true, true) => {}
        (true, false) => return alpha - 1.0,
        (false, true) => return beta + 1.0,
        (false, false) => return 0.0,
    }
    let cost = |eta: f64| (1.0 / (alpha - eta).powi(2) - 1.0 / (eta - beta).powi(2)).abs();
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let width = alpha - beta;
    let (mut a, mut b) = (beta + 1e-9 * width, alpha - 1e-9 * width);
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    while (b - a).abs() > 1e-12 * width.max(1.0) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = cost(d);
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example1() -> DichotomySplit {
        DichotomySplit::from_eigenvalues(vec![-1.0, 1.0]).unwrap()
    }

    #[test]
    fn example1_projections() {
        let s = example1();
        let v = StateVector::new(vec![0.3, -2.0]);
        assert_eq!(project_stable(&s, &v).unwrap().coords(), &[0.3, 0.0]);
        assert_eq!(project_unstable(&s, &v).unwrap().coords(), &[0.0, -2.0]);
        assert_eq!((s.alpha(), s.beta(), s.bound_k()), (1.0, -1.0, 1.0));
    }

    #[test]
    fn semigroup_examples() {
        let s = example1();
        let v = StateVector::new(vec![1.0, 0.0]);
        assert_eq!(semigroup_apply(&s, 0.0, &v).unwrap(), v);
        let out = semigroup_apply(&s, 1.0, &v).unwrap();
        assert!((out[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert!(matches!(
            semigroup_apply(&s, -1.0, &v),
            Err(Error::Domain(_))
        ));
        let u = StateVector::new(vec![0.0, 2.0]);
        let back = semigroup_apply(&s, -1.0, &u).unwrap();
        assert!((back[1] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn dimension_checked() {
        let s = example1();
        assert!(matches!(
            project_stable(&s, &StateVector::zeros(3)),
            Err(Error::Dimension { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn zero_eigenvalue_rejected() {
        assert!(DichotomySplit::from_eigenvalues(vec![-1.0, 0.0, 2.0]).is_err());
        assert!(DichotomySplit::from_eigenvalues(vec![]).is_err());
    }

    #[test]
    fn gap_arithmetic() {
        let s = example1();
        let r = check_gap_condition(&s, 0.0, 0.0).unwrap();
        assert_eq!((r.value, r.satisfied, r.margin), (0.0, true, 1.0));
        let r = check_gap_condition(&s, 0.4, 0.0).unwrap();
        assert!((r.value - 0.8).abs() < 1e-15 && r.satisfied);
        let r = check_gap_condition(&s, 0.6, 0.0).unwrap();
        assert!((r.value - 1.2).abs() < 1e-15 && !r.satisfied);
        assert!(check_gap_condition(&s, 0.4, 1.0).is_err());
        assert!(check_gap_condition(&s, 0.4, -1.5).is_err());
    }

    #[test]
    fn auto_eta_is_midpoint() {
        let s = example1();
        assert!(auto_eta(&s).abs() < 1e-9);
        let s = DichotomySplit::from_eigenvalues(vec![10.0 - std::f64::consts::PI.powi(2), -30.0, -70.0]).unwrap();
        let mid = 0.5 * (s.alpha() + s.beta());
        assert!((auto_eta(&s) - mid).abs() < 1e-9);
    }

    #[test]
    fn constants_override_validated() {
        let s = example1();
        assert!(s.clone().with_constants(0.5, -0.5, 2.0).is_ok());
        assert!(s.clone().with_constants(2.0, -1.0, 1.0).is_err());
        assert!(s.with_constants(1.0, -1.0, 0.5).is_err());
    }

    fn split_and_vector() -> impl Strategy<Value = (DichotomySplit, StateVector)> {
        prop::collection::vec(
            prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            1..6,
        )
        .prop_flat_map(|eig| {
            let n = eig.len();
            (Just(eig), prop::collection::vec(-3.0f64..3.0, n))
        })
        .prop_map(|(eig, v)| {
            (
                DichotomySplit::from_eigenvalues(eig).unwrap(),
                StateVector::new(v),
            )
        })
    }

    proptest! {
        #[test]
        fn projection_algebra((s, v) in split_and_vector(), t in 0.0f64..3.0) {
            let ps = project_stable(&s, &v).unwrap();
            let pu = project_unstable(&s, &v).unwrap();
            prop_assert_eq!(project_stable(&s, &ps).unwrap(), ps.clone());
            prop_assert!(project_unstable(&s, &ps).unwrap().norm() == 0.0);
            prop_assert!((&ps + &pu).distance(&v) <= 1e-12);
            let a = project_unstable(&s, &semigroup_apply(&s, t, &v).unwrap()).unwrap();
            let b = semigroup_apply(&s, t, &pu).unwrap();
            prop_assert!(a.distance(&b) <= 1e-12);
        }

        #[test]
        fn semigroup_composition((s, v) in split_and_vector(), t in 0.0f64..2.0, r in 0.0f64..2.0) {
            let two_steps = semigroup_apply(&s, r, &semigroup_apply(&s, t, &v).unwrap()).unwrap();
            let one_step = semigroup_apply(&s, r + t, &v).unwrap();
            prop_assert!(two_steps.distance(&one_step) <= 1e-12 * (1.0 + one_step.norm()));
        }

        #[test]
        fn dichotomy_estimates((s, v) in split_and_vector(), t in prop::sample::select(vec![0.5, 1.0, 2.0])) {
            let ps = project_stable(&s, &v).unwrap();
            let forward = semigroup_apply(&s, t, &ps).unwrap();
            prop_assert!(forward.norm() <= s.bound_k() * (s.beta() * t).exp() * v.norm() + 1e-12);
            let pu = project_unstable(&s, &v).unwrap();
            let backward = semigroup_apply(&s, -t, &pu).unwrap();
            prop_assert!(backward.norm() <= s.bound_k() * (-s.alpha() * t).exp() * v.norm() + 1e-12);
        }

        #[test]
        fn gap_margin_decreases_in_lipschitz(l1 in 0.0f64..5.0, dl in 1e-3f64..5.0, eta in -0.9f64..0.9) {
            let s = example1();
            let a = check_gap_condition(&s, l1, eta).unwrap();
            let b = check_gap_condition(&s, l1 + dl, eta).unwrap();
            prop_assert!(b.margin < a.margin);
        }
    }
}
