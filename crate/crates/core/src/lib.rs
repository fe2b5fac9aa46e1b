//! Partially pooled approximate balancing weights for subgroup and overall
//! treatment effects on the treated.
//!
//! The pipeline is: load a [`data::AnalysisSample`], build a
//! [`data::FeatureMatrix`], solve for weights with [`solver::solve`], turn
//! them into estimates with [`estimators`], and check them with
//! [`diagnostics`] and [`sensitivity`]. [`simulation`] runs the synthetic
//! benchmark.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub(crate) mod linalg;
pub mod rng;
pub mod sensitivity;
pub mod simulation;
pub mod solver;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
