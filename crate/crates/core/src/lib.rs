//! Covariate-balancing weights and treatment-effect estimation.
//!
//! The crate solves the entropy-balancing dual program to produce weights
//! that exactly (or approximately, with a ridge relaxation) match covariate
//! moments between a source group and a target population, and builds the
//! surrounding estimation toolkit: inverse-probability weighting, outcome
//! regression, doubly robust combinations, sandwich and closed-form
//! asymptotic variances, and two standard simulation benchmarks.
//!
//! All numeric code is generic over the scalar type through [`Scalar`];
//! `f64` aliases for the main types live at the crate root.

pub mod error;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod propensity;
pub mod scalar;
pub mod sim;
pub mod solver;
pub mod variance;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision aliases for the main library types.
pub type Dataset = model::ObservationalDataset<f64>;
pub type Moments = model::MomentSpec<f64>;
pub type Target = model::BalanceTarget<f64>;
pub type Report = model::EstimateReport<f64>;
pub type Problem = solver::BalanceProblem<f64>;
pub type Settings = solver::SolverSettings<f64>;
pub type Solution = solver::BalanceSolution<f64>;
pub type Propensity = propensity::PropensityFit<f64>;
pub type Outcome = estimators::OutcomeFit<f64>;
pub type Covariances = variance::MomentCovariances<f64>;


