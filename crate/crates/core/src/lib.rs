//! Stable leaves of random invariant foliations for semilinear evolution
//! equations driven by small multiplicative Stratonovich noise
//! `dU = (AU + F(U)) dt + eps U o dW`.
//!
//! After the Ornstein-Uhlenbeck conjugation `u = exp(-eps Z(theta_t w)) U` the
//! equation becomes a random ODE. For a base point `phi0` the stable leaf is the
//! graph `xi -> xi + l(xi)` over the stable subspace, and this crate provides
//!
//! * a first-order expansion `l = l_d + eps l_1 + O(eps^2)` ([`expansion`]),
//! * a direct Lyapunov-Perron fixed point for the exact leaf ([`leaf_solver`]),
//! * the noise functionals both need ([`noise`]),
//! * the two reference models and user polynomial models ([`models`]),
//! * ensemble and convergence drivers used by the `foliation` binary
//!   ([`experiments`]).

// `!(x > 0.0)` is how NaN inputs get rejected; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dichotomy;
pub mod error;
pub mod expansion;
pub mod experiments;
pub mod grid;
pub mod leaf_solver;
pub mod models;
pub mod noise;
pub mod parallel;
pub mod stats;

mod integrate;

pub use dichotomy::{DichotomySplit, GapReport, StateVector};
pub use error::{Error, Result};
pub use expansion::{ExpansionOptions, ExpansionState, LeafApproximation, LeafSample};
pub use grid::{TimeGrid, Trajectory};
pub use leaf_solver::{FixedPointReport, MembershipReport};
pub use models::ModelSpec;
pub use noise::{BrownianPath, OuProcess};
pub use parallel::Execution;
