//! Numerical toolkit for stochastic optimal control with a mean-field
//! terminal cost: seeded Euler-Maruyama simulation, probabilistic evaluation
//! of the backward value and terminal-mean fields, maximum-principle
//! optimality checks (variational inequality, spike-difference identity,
//! sufficiency sampling), the terminal-mean fixed point, and a
//! decoupling-field solver for the associated forward-backward system.

pub mod error;
pub mod fbspde;
pub mod feynman_kac;
pub mod meanfield;
pub mod problem;
pub mod rng;
pub mod sde;
pub mod smp;
pub mod stats;

pub use error::{CoreError, Result};
