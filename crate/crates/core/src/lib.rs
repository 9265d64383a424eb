//! Solver suite for ODE initial-value problems, DAE initial-value problems,
//! and nonlinear algebraic systems.
//!
//! The building blocks mirror each other across problem classes:
//!
//! * [`vector`] — backend-abstracted real vectors (serial, threaded, and
//!   user-defined custom backends) with a fixed operation set.
//! * [`matrix`] — dense, banded, and sparse (CSC/CSR) matrix content behind
//!   a small abstract operation interface.
//! * [`linsolver`] — direct (dense/band LU) and iterative (restarted GMRES)
//!   linear solvers, each attachable to at most one session.
//! * [`nonlinear`] — standalone Newton and fixed-point iterations.
//! * [`ode`] — adaptive-step, variable-order Adams/BDF integrator with
//!   zero-crossing detection and reinitialization.
//! * [`dae`] — BDF integrator for implicit systems F(t, y, y') = 0 with
//!   consistent-initialization support.
//! * [`rootfind`] — step-local zero-crossing scan and refinement.
//! * [`bench`] — repeated-execution timing and rank-sum ratio confidence
//!   intervals.

pub mod bench;
pub mod dae;
pub mod error;
pub mod linsolver;
pub mod matrix;
mod multistep;
pub mod nonlinear;
pub mod ode;
pub mod rootfind;
pub mod vector;

pub use error::{CallbackError, Error, Result};
pub use matrix::Matrix;
pub use vector::Vector;
