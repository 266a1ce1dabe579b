//! Backward doubly stochastic control.
//!
//! Numerical library for recursive optimal control problems whose cost is
//! carried by a backward equation with two independent noises: a forward
//! Ito integral in `W` and a backward Ito integral in a shared driver `B`.
//! The pieces:
//!
//! - [`grid`], [`coeffs`], [`env`], [`weight`]: domain types, the model
//!   registry's coefficient contract, the seeded Brownian environment, and
//!   the weight for the weighted Sobolev norms.
//! - [`sde`]: explicit Euler-Maruyama forward simulation and moment checks.
//! - [`bdsde`]: regression-based backward solver, the penalized variant
//!   with its increasing process, comparison and stability harnesses.
//! - [`value`]: the dynamic-programming value field, the backward
//!   semigroup, and the principle-of-optimality checks.
//! - [`weak`]: the weak-solution certificate for the associated stochastic
//!   HJB equation (weighted norms, test-function inequalities, adjoint
//!   identity, supersolution representation).
//! - [`registry`], [`config`], [`runner`], [`report`]: built-in models and
//!   the configuration-driven experiment runner behind the CLI.
//!
//! Everything is seeded explicitly and reproduces bit-identically for a
//! given `(master_seed, b_seed)`, independent of worker count.

pub mod bdsde;
pub mod coeffs;
pub mod config;
pub mod csvio;
pub mod env;
pub mod error;
pub mod grid;
pub mod policy;
pub mod regression;
pub mod registry;
pub mod report;
pub mod rng;
pub mod runner;
pub mod sde;
pub mod stats;
pub mod testfn;
pub mod value;
pub mod weak;
pub mod weight;

pub use coeffs::{CoefficientSet, Coefficients, ModelDims};
pub use env::{build_environment, BrownianEnvironment};
pub use error::{Error, Result};
pub use grid::{ControlSet, SpaceGrid, TimeGrid};
pub use policy::ControlPolicy;
pub use sde::{simulate_forward, PathEnsemble};
