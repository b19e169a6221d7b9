//! Off-policy evaluation and learning of the always-survivor value function
//! for two-stage (and general-K) dynamic treatment regimes under monotone
//! censoring and truncation by death.
//!
//! The crate provides:
//!
//! - a validated trajectory/dataset model with CSV ingestion ([`trajectory`]),
//! - nuisance-model fitting (logistic IRLS, least squares, spline bases) and
//!   a pluggable evaluation interface ([`nuisance`]),
//! - the multiply robust value estimator with EIF-based inference, plus
//!   plug-in, IPW and death-as-censoring AIPW baselines ([`estimators`]),
//! - J-fold cross-fitting ([`crossfit`]),
//! - linear-policy search by differential evolution and PCD-AS scoring
//!   ([`policy`], [`de`]),
//! - a simulation engine with two built-in data generating processes,
//!   ground-truth oracles and replication harnesses ([`simulation`]),
//! - a principal-ignorability sensitivity analysis ([`sensitivity`]),
//! - a general-K extension of the estimator ([`kstage`]).

pub mod crossfit;
pub mod de;
pub mod error;
pub mod estimators;
pub mod features;
pub mod kstage;
pub mod math;
pub mod nuisance;
pub mod policy;
pub mod regression;
pub mod rng;
pub mod scenario;
pub mod sensitivity;
pub mod simulation;
pub mod trajectory;

pub use error::Error;
pub use estimators::{EstimateReport, EstimatorKind};
pub use nuisance::{FittedSuite, Nuisances, TrimConfig};
pub use policy::LinearPolicy;
pub use scenario::{ModelSpec, ScenarioSpec};
pub use simulation::SimConfig;
pub use trajectory::{Dataset, Trajectory};

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
