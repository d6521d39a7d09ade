//! Multi-task dynamical systems (MTDS).
//!
//! A hypernetwork maps a low-dimensional latent task code `z` to the full
//! parameter set of a deterministic-state dynamical system (a stable LDS or a
//! tanh RNN). The library provides:
//!
//! - [`paramspace`]: constrained matrix parameterizations (Cayley-orthogonal
//!   stable transitions, bounded input matrices) with exact reverse-mode
//!   adjoints;
//! - [`model`]: the hypernetwork, system realization, rollouts, Gaussian
//!   log-likelihood and full backpropagation through time;
//! - [`dho`]: the damped-harmonic-oscillator benchmark generator;
//! - [`learn`]: importance-sampled Monte Carlo objective training with Sobol
//!   prior sampling, variational ELBO training, and Adam;
//! - [`infer`]: test-time adaptation by iterated adaptive importance sampling
//!   with mixture-of-Gaussians proposals, plus posterior-predictive metrics.
//!
//! All randomized routines take explicit seeds or `Rng` handles; results are
//! bit-reproducible for a fixed seed regardless of worker count.

pub mod dho;
pub mod infer;
pub mod learn;
pub mod linalg;
pub mod model;
pub mod paramspace;

mod error;

pub use error::{Error, Result};
