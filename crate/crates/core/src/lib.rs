//! Mean-field-game equilibrium engine for optimal execution with anonymous
//! and identity-revealed trading channels.

pub mod cli;
pub mod experiments;
pub mod grid;
pub mod meanfield;
pub mod model;
pub mod objective;
pub mod riccati;
pub mod rng;
pub mod scalar;
pub mod simulator;
pub mod stats;
pub mod svg;
pub mod table;
pub mod validation;

pub use model::{derive_coefficients, validate_params, Coefficients, ParamSet};
pub use scalar::Scalar;

pub type Params = ParamSet<f64>;
pub type Coeffs = Coefficients<f64>;
pub type Grid = grid::TimeGrid<f64>;
pub type Tables = riccati::RiccatiTables<f64>;
pub type Trajectory = meanfield::MeanFieldTrajectory<f64>;
