//! Decentralized robust social-optimal control for mean-field LQG agent
//! populations facing a common adversarial drift.
//!
//! The crate synthesizes the decentralized feedback laws and the realized
//! worst-case drift for large populations of linear-quadratic-Gaussian
//! agents coupled through their empirical average, verifies the checkable
//! convexity certificates, solves the mean-field consistency system by
//! Riccati decoupling (with an independent shooting cross-check), simulates
//! the closed loop by Monte Carlo, and validates the asymptotic-optimality
//! rates against small-population centralized oracles.
//!
//! Entry points:
//! - [`model`]: problem data, validation, scenario files;
//! - [`riccati`]: the three Riccati equations, finite and infinite horizon;
//! - [`convexity`]: certificates and the empirical convexity probe;
//! - [`consistency`]: the mean-field consistency system and its decoupling;
//! - [`control`]: feedback laws, Monte Carlo simulation, rate sweeps;
//! - [`oracle`]: stacked centralized ground truth at small population sizes;
//! - [`verification`]: the end-to-end check suite run by
//!   `mfgsoc verify-paper-example`.

pub mod consistency;
pub mod control;
pub mod convexity;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod riccati;
pub mod verification;

pub use model::{validate_params, ModelParams, ValidatedModel};
pub use numerics::{Matrix, TimeGrid, Vector};
