//! Clustering of multivariate count data with finite mixtures of
//! multivariate Poisson-log-normal factor analyzers (MPLNFA).
//!
//! Counts are modelled as conditionally Poisson given a latent Gaussian
//! log-rate whose covariance has the factor-analyzer form `ΛΛᵀ + Ψ`. Fitting
//! uses a two-stage variational EM: the first stage updates Gaussian
//! variational posteriors for the log-rates, the responsibilities, mixing
//! weights and means; the second stage updates the factor loadings and
//! error variances under one of eight parsimonious constraint patterns.
//!
//! The crate is organised as
//!
//! * [`model`]: domain types, constraint taxonomy, parameter counting.
//! * [`stage1`]: per-observation ELBO and the variational `S`/`m` updates.
//! * [`stage2`]: sufficient statistics and the constrained `Λ`/`Ψ` estimators.
//! * [`em`]: initialization, the outer loop, BIC/ICL and grid search.
//! * [`sim`]: data generation from the hierarchy, with built-in presets.
//! * [`eval`]: adjusted Rand index, `MSE(Σ)` and recovery summaries.
//!
//! Per-observation work runs on rayon when the `parallel` feature is enabled
//! (the default); every reduction is an ordered sum so results do not depend
//! on the thread count.

pub mod em;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod linalg;
pub mod model;
pub mod par;
pub mod sim;
pub mod stage1;
pub mod stage2;

pub use em::{
    bic, fit_single, grid_search, icl, initialize, Diagnostics, FitConfig, FitResult, FitSummary,
    GridResult,
};
pub use error::{Error, Result};
pub use eval::{ari, match_components, mse_sigma, recovery_report, ComponentRecovery};
pub use model::{
    assemble_sigma, covariance_param_count, total_free_params, ComponentParams, CountMatrix,
    MixtureModel, ModelId, NormalizationFactors, VariationalState,
};
pub use sim::{generate, Preset, SimulatedData, SimulationConfig};
