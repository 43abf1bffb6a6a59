//! Kernel U-statistic estimation of Sobol' sensitivity indices.
//!
//! The central quantity is `E[E[Y|X]^2]` for a group `X` of independent
//! inputs, estimated by a pairwise kernel statistic whose one-sided,
//! higher-order kernel is reflected inward at the domain boundary. Sobol'
//! indices, confidence intervals, a bandwidth selector, density plug-ins and
//! baseline estimators are built on top.

pub mod error;
pub mod sum;
pub mod quadrature;
pub mod kernel;
pub mod domain;
pub mod inputs;
pub mod estimator;
pub mod bandwidth;
pub mod density;
pub mod baselines;
pub mod testbed;
pub mod cli;

pub use error::{Result, SobolError};
