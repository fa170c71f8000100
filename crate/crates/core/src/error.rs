//! Error type shared by every module.

use thiserror::Error;

/// Errors surfaced by the library.
///
/// Variants are grouped so that front ends can map them onto distinct exit
/// codes: configuration/input-shape problems, support violations of an
/// importance ratio, and I/O or serialization failures.
#[derive(Debug, Error)]
pub enum OpeError {
    /// Table or vector dimensions disagree with the MDP or policy.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A probability table violates stochasticity or sign constraints.
    #[error("invalid probabilities: {0}")]
    InvalidProbability(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An importance ratio needs a behavior probability that is zero.
    #[error(
        "support violation at trajectory {trajectory}, step {step}: state {state}, action {action} \
         has target probability > 0 but behavior probability 0"
    )]
    SupportViolation {
        trajectory: usize,
        step: usize,
        state: usize,
        action: usize,
    },

    /// KL divergence is infinite because the target puts mass where the
    /// reference has none.
    #[error("infinite divergence: state {state}, action {action} is unsupported by the reference policy")]
    InfiniteDivergence { state: usize, action: usize },

    /// An estimator that needs every counterfactual annotation found a gap.
    #[error("missing annotation at trajectory {trajectory}, step {step}, action {action}")]
    MissingAnnotation {
        trajectory: usize,
        step: usize,
        action: usize,
    },

    /// Input data is empty or degenerate where a value is required.
    #[error("empty or degenerate input: {0}")]
    EmptyInput(String),

    /// Filesystem failure.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON document.
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed TOML document.
    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),

    /// CSV writer failure.
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, OpeError>;

impl OpeError {
    /// Whether the error is a support violation of an importance ratio.
    pub fn is_support_violation(&self) -> bool {
        matches!(
            self,
            OpeError::SupportViolation { .. } | OpeError::InfiniteDivergence { .. }
        )
    }

    /// Whether the error originates from the filesystem or a serializer.
    pub fn is_io(&self) -> bool {
        matches!(self, OpeError::Io(_) | OpeError::Csv(_))
    }
}
