//! Solver core for finite-horizon stochastic control problems driven by
//! Pontryagin's principle.
//!
//! The crate implements the modified method of successive approximations
//! (forward SDE solve, adjoint BSDE solve, proximal Hamiltonian update), the
//! control-space gradient flow it discretizes, and the numerical checks that go
//! with them: energy identity, convexity gap bound, and convergence rates in
//! flow time.
//!
//! Everything here is `no_std` + `alloc`. File formats, configuration and the
//! command line live in the companion `gradflow` crate.
//!
//! Layout of the main pieces:
//!
//! * [`grid`], [`noise`], [`field`]: time grids, Brownian ensembles, control
//!   fields and the discrete `L²`-progressive norms.
//! * [`problem`], [`models`]: the [`ControlProblem`] trait, the Hamiltonian and
//!   the built-in example problems.
//! * [`sde`]: Euler–Maruyama forward simulation and cost estimation.
//! * [`bsde`]: least-squares Monte Carlo adjoint solver, the linear-quadratic
//!   analytic adjoint and residual diagnostics.
//! * [`prox`], [`msa`], [`flow`]: pointwise control updates, the outer
//!   successive-approximation loop and the flow integrator.
//! * [`analysis`]: rate fitting and the executable convergence checks.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod bsde;
mod error;
pub mod field;
pub mod flow;
pub mod grid;
pub mod linalg;
pub mod models;
pub mod msa;
pub mod noise;
pub mod problem;
pub mod prox;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use field::{AdjointSolution, ControlField, StatePaths};
pub use grid::{EnsembleShape, TimeGrid};
pub use noise::BrownianEnsemble;
pub use problem::{ControlProblem, Dims};
