//! Training engines: the importance-sampled Monte Carlo objective with
//! Sobol prior sampling, the variational ELBO with KL warm-up, and Adam.

mod adam;
mod elbo;
mod mco;
mod sobol;

pub use adam::AdamState;
pub use elbo::{
    elbo_batch_gradient, kl_diag_gaussian, ElboBatchGrad, ElboConfig, ElboTrainer,
    VariationalParams,
};
pub use mco::{
    construct_weights, log_s_prior_penalty, mco_epoch, mco_gradient_with_particles,
    mco_objective_estimate, transition_lr_scale, EpochStats, McoConfig, McoTrainer, ScheduleRow,
};
pub use sobol::{
    inv_std_normal_cdf, sobol_standard_normal, sobol_uniform, SobolSeq, SOBOL_MAX_DIM,
};
