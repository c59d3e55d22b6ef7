//! Simulation lab for look-alike clustering in high-dimensional linear and
//! logistic-type regression.
//!
//! Sensitive features of each sample are replaced by the center of its
//! cluster before fitting a minimum-norm interpolator. The crate generates
//! data from a Gaussian mixture model, fits both the raw and the anonymized
//! estimators, evaluates their out-of-sample risk exactly or by Monte Carlo,
//! and compares against closed-form proportional-asymptotic predictions.

pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod glm;
pub mod linalg;
pub mod risk;
pub mod stats;
pub mod sweep;
pub mod theory;

pub use config::{build_ground_truth, GroundTruth, Priors, ProblemConfig, Regime};
pub use data::{anonymize, sample_dataset, AnonymizedDataset, CenterSource, Dataset};
pub use error::{LabError, Result};
pub use estimators::{fit_look_alike, min_norm_fit, ridge_fit, EstimatorKind, FittedModel};
pub use exec::{Execution, LabRng};
pub use risk::{gain, risk_closed_form, risk_monte_carlo, RiskReport};
pub use theory::{gain_theory, risk_lookalike, risk_minnorm, TheoryParams, TheoryPrediction};
