//! Discrete hypocoercivity toolkit for linear and weakly nonlinear kinetic
//! equations on the torus `T¹ × ℝ`.
//!
//! The library is organised bottom-up:
//!
//! - [`phase_grid`]: periodic x grid, truncated velocity quadrature, fields.
//! - [`models`]: collision operators, kernels, projections, equilibria.
//! - [`constants`]: measured structural constants and the derived weights.
//! - [`hypocoercivity`]: Lyapunov functionals, spectral gaps and abscissae.
//! - [`solver`]: time integration with conservation and Lyapunov tracking.

pub mod constants;
pub mod error;
pub mod hypocoercivity;
mod linalg;
pub mod models;
pub mod phase_grid;
pub mod solver;

pub use error::{Error, Result};
pub use models::{Model, ModelKind, ModelSpec};
pub use phase_grid::{DistributionField, GridSpec, PhaseGrid, Quadrature};
