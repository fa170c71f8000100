//! Counterfactual-augmented importance sampling for semi-offline policy
//! evaluation in tabular bandits and finite-horizon MDPs.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp_core`]: tabular MDPs, policies, trajectories, exact dynamic
//!   programming (values, horizon-indexed Q-functions, occupancies) and
//!   trajectory sampling.
//! - [`environments`]: bandits, the didactic tree MDP, the sepsis-inspired
//!   simulator, and behavior/evaluation policy families.
//! - [`annotation`]: simulated counterfactual annotations, availability
//!   masks, weighting schemes, the augmented behavior policy, bias
//!   correction through an approximate model, and imputation.
//! - [`estimators`]: IS/PDIS/WIS baselines, the counterfactual-augmented
//!   family (C-IS, C*-IS, C-PDIS, C*-PDIS), naive augmentation baselines,
//!   augmented ratios, ESS, and closed-form bias/variance calculators.
//! - [`experiments`]: metrics and the experiment harness (bandit tables,
//!   weight/missingness heatmaps, sepsis suite) with CSV + manifest output.
//!
//! Every stochastic operation draws from an explicit [`rng::StreamKey`], so
//! results are reproducible and independent of parallel scheduling.

pub mod annotation;
pub mod environments;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod mdp_core;
pub mod numeric;
pub mod rng;

pub use error::{OpeError, Result};

/// Version tag written into every serialized artifact.
pub const FORMAT_VERSION: u32 = 1;
