//! Solver and numerical certification toolkit for two-player
//! linear-quadratic stochastic differential games of mean-field type in
//! which both players observe only the first Brownian channel.
//!
//! The pipeline: [`riccati`] computes the feedback Nash equilibrium,
//! [`sde`] simulates state and filter paths, [`cost`] evaluates the
//! quadratic costs by Monte Carlo and by exact moment equations,
//! [`nash_verify`] certifies the equilibrium through unilateral
//! deviations, Gateaux derivatives, the variational inequality and the
//! conditional Hamiltonian gradient, and [`fbsde`] recomputes the
//! equilibrium from the adjoint equations by least-squares Monte Carlo
//! without using the Riccati tables. [`cli`] wires everything into the
//! `mfgame` binary.

pub mod cli;
pub mod cost;
pub mod error;
pub mod fbsde;
pub mod model;
pub mod nash_verify;
pub mod ode;
pub mod paths;
pub mod riccati;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use model::{LqGameSpec, Player, TimeGrid};
pub use paths::PathMatrix;
