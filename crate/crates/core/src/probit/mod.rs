//! Random-parameter ordered probit with heterogeneity in means and
//! correlated random coefficients, estimated by simulated maximum likelihood.

use thiserror::Error;

pub mod data;
pub mod derived;
pub mod estimate;
pub mod halton;
pub mod likelihood;
pub mod model;
pub mod optimize;

pub use data::Dataset;
pub use estimate::{
    estimate, estimate_with, marginal_effect, marginal_effects, predicted_shares, EffectMode, EstimateOptions,
    EstimationResult,
};
pub use likelihood::{loglik_at, simulated_loglik, Evaluator, MissingPolicy};
pub use model::{CholeskyMode, ModelSpec, ParamKind, Parameters, CONSTANT};

#[derive(Debug, Error)]
pub enum ProbitError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid model: {0}")]
    Spec(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
}
