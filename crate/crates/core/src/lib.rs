//! Level-set topology optimization of Stokes-Brinkman flow distributors.
//!
//! The pipeline: a Taylor-Hood discretization of the Brinkman-penalized
//! Stokes equations on the unit square, a one-step implicit heat smoothing
//! of the velocity, an objective measuring where the smoothed speed falls
//! below a target, adjoint-based topological derivatives, a spherical
//! level-set update with a volume constraint, and a deflation loop that
//! penalises proximity to previously found minimizers.

pub mod cli_io;
pub mod deflation;
pub mod error;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod objective;
pub mod optimizer;
pub mod physics;
pub mod topderiv;

pub use error::{Error, Result, SolveError};
