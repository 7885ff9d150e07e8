//! Simulation and verification toolkit for finite Galerkin truncations of
//! dissipative SDEs with a singular monotone drift and a bounded
//! perturbation, together with finite-state potential theory.

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod config;
pub mod diagnostics;
pub mod engine;
pub mod girsanov;
pub mod io;
pub mod error;
pub mod model;
pub mod potential;
pub mod quad;
pub mod resolvent;
pub mod rng;
pub mod stats;
pub mod testfn;

pub use engine::{
    ou_exact_step, simulate_ensemble, simulate_path, step, synchronous_pair, Dynamics, Ensemble, LazyEnsemble,
    PathSource, Scheme, SimConfig, Trajectory,
};
pub use error::{Error, Result};
pub use model::{
    minimal_selection, proximal_step, validate_model, BoundedDrift, DriftSpec, GalerkinModel, Potential,
    ValidationReport,
};
pub use resolvent::{Estimator, GradientEstimate, KernelEstimate, ScalarFn};
pub use testfn::TestFn;
pub use config::{Config, Loaded};
pub use potential::DiscreteResolvent;
