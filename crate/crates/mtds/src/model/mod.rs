//! The multi-task model: hypernetwork, base-model realizations, rollouts,
//! Gaussian log-likelihood, and exact reverse-mode gradients through the
//! whole stack (BPTT plus the parameterization adjoints).

mod hypernet;
mod realize;
mod rollout;

pub use hypernet::{featurize, featurize_backward, HyperNetParams, HypernetCache, LatentCode};
pub use realize::{
    realize_lds, realize_lds_backward, realize_rnn, realize_rnn_backward, similarity_transform,
    LdsCache, LdsRealization, RnnRealization, SystemGrad,
};
pub use rollout::{
    gaussian_loglik, gaussian_loglik_backward, loss_backward, rollout_lds, rollout_lds_backward,
    rollout_rnn, rollout_rnn_backward, LossGrad, RolloutResult,
};

use serde::{Deserialize, Serialize};

/// Which state recursion the realized system uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseModel {
    /// Linear dynamics with a stability-constrained transition.
    Lds,
    /// tanh recursion with an unconstrained transition.
    Rnn,
}

/// Model dimensions: state `n`, input `m`, observation `p`, latent code `k`,
/// hypernetwork hidden width `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub k: usize,
    pub h: usize,
}

impl ModelDims {
    /// The benchmark configuration: 4-d state, impulse input, scalar
    /// observations, 4-d latent code, 300-unit hidden layer.
    pub fn dho() -> Self {
        Self {
            n: 4,
            m: 1,
            p: 1,
            k: 4,
            h: 300,
        }
    }

    /// Length of the fixed feature vector `[z; sin z; cos z; |z|]`.
    pub fn feature_len(&self) -> usize {
        3 * self.k + 1
    }

    /// Length of the raw parameter vector produced by the hypernetwork.
    pub fn raw_len(&self, base: BaseModel) -> usize {
        match base {
            BaseModel::Lds => realize::lds_raw_len(self.n, self.m, self.p),
            BaseModel::Rnn => realize::rnn_raw_len(self.n, self.m, self.p),
        }
    }
}
