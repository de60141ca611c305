//! Gaussian Markov-switching models with time-varying transition
//! probabilities.
//!
//! Four transition specifications are supported: constant, driven by the
//! lagged observation, driven by an exogenous covariate, and score driven
//! (GAS). The crate covers simulation, Hamilton filtering, multi-start
//! maximum likelihood with delta-method standard errors, the Monte Carlo
//! evaluation harness and the yield-change pipeline.

pub mod data;
pub mod dynamics;
pub mod empirical;
pub mod error;
pub mod estimate;
pub mod evaluation;
pub mod filter;
pub mod link;
pub mod mc;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod simulate;

pub use data::Dataset;
pub use error::{Error, Result};
pub use estimate::{estimate, estimate_with, standard_errors, transforms_for, EstimateOptions, EstimationResult};
pub use filter::{classify_regimes, run_filter, FilterOutput};
pub use link::{link_f_to_matrix, link_jacobian, link_matrix_to_f, TransitionMatrix};
pub use model::{Coefficients, Dynamics, ModelSpec, Parameterization, Params, VarianceStructure};
pub use simulate::{dgp_preset, simulate, SimOutput};
