//! Test-time adaptation: iterated adaptive importance sampling with
//! mixture-of-Gaussians proposals, filtered posteriors over `(z, log s)`,
//! posterior predictives, and RMSE/NLL metrics.

mod adais;
mod mog;
mod predictive;

pub use adais::{
    adais_refine, ess, filter_posteriors, AdaisHyper, AdaisResult, FilteredPosterior,
    InferenceTarget, LogTarget,
};
pub use mog::{weighted_em, weighted_moments, EmFit, EmInit, GaussianComponent, MoGPosterior};
pub use predictive::{
    metrics_rmse_nll, posterior_predictive, std_normal_cdf, PosteriorPredictive,
};

/// Default prior over `log s` at inference time: `N(-2.0, 0.1^2)`.
pub const LOG_S_PRIOR: (f64, f64) = (-2.0, 0.1);
