//! The pooled baseline: one constrained raw parameter vector (same layout
//! and parameterization as the per-task realization) shared by every
//! sequence, trained by Adam on the summed log-likelihood. No
//! hypernetwork, no latent code.

use anyhow::Result;
use mtds::dho::SequenceSet;
use mtds::learn::AdamState;
use mtds::model::{
    gaussian_loglik_backward, realize_lds, realize_lds_backward, rollout_lds,
    rollout_lds_backward,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PooledModel {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Constrained raw parameters (stable-transition layout).
    pub raw: Array1<f64>,
    pub log_s: f64,
}

impl PooledModel {
    /// Deterministic rollout over `u`; identical for every task.
    pub fn predict(&self, u: &Array2<f64>) -> Result<Array2<f64>> {
        let (real, _) = realize_lds(self.raw.view(), self.n, self.m, self.p, self.log_s)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        Ok(rollout_lds(&real, u.view()).predictions)
    }

    pub fn s(&self) -> f64 {
        self.log_s.exp()
    }
}

pub struct PooledTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PooledTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            lr: 5e-3,
            seed: 0,
        }
    }
}

/// Gradient ascent on `sum_i log p(Y_i | theta)` with the transition block
/// at lr/10 (same rule as the hypernetwork trainer).
pub fn train_pooled(data: &SequenceSet, config: &PooledTrainConfig) -> Result<PooledModel> {
    let (n, m, p) = (4usize, 1usize, 1usize);
    let raw_len = mtds::model::ModelDims { n, m, p, k: 1, h: 1 }
        .raw_len(mtds::model::BaseModel::Lds);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(0x504f_4f4c);
    let mut raw = Array1::from_shape_fn(raw_len, |_| rng.random_range(-0.3..0.3));
    for i in 0..n {
        raw[i] = 1.5 + rng.random_range(-0.2..0.2); // slowly decaying init
    }
    let mut log_s = -1.0f64;

    let trans_len = n + n * (n - 1) / 2;
    let mut lr_scale = vec![1.0; raw_len + 1];
    for s in lr_scale.iter_mut().take(trans_len) {
        *s = 0.1;
    }

    let mut adam = AdamState::new(raw_len + 1);
    let steps = data.seq_len();
    for _ in 0..config.epochs {
        let (real, cache) = realize_lds(raw.view(), n, m, p, log_s)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let roll = rollout_lds(&real, data.inputs.view());
        // one rollout serves every task; residual gradients accumulate
        let mut yhat_bar = Array2::zeros((steps, p));
        let mut d_log_s = 0.0;
        for i in 0..data.len() {
            let y = data
                .sequences
                .row(i)
                .to_owned()
                .into_shape_with_order((steps, p))
                .expect("scalar sequences");
            let (dyh, dls) = gaussian_loglik_backward(y.view(), roll.predictions.view(), real.s);
            yhat_bar += &dyh;
            d_log_s += dls;
        }
        let sys = rollout_lds_backward(&real, data.inputs.view(), &roll, yhat_bar.view());
        let raw_bar = realize_lds_backward(&cache, &sys);

        let mut params: Vec<f64> = raw.iter().copied().chain([log_s]).collect();
        let grad: Vec<f64> = raw_bar.iter().map(|g| -g).chain([-d_log_s]).collect();
        adam.step(&mut params, &grad, config.lr, Some(&lr_scale))
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        for (i, v) in raw.iter_mut().enumerate() {
            *v = params[i];
        }
        log_s = params[raw_len];
    }

    Ok(PooledModel {
        n,
        m,
        p,
        raw,
        log_s,
    })
}

/// Pooled log-likelihood of the whole set under the model (diagnostic).
pub fn pooled_loglik(model: &PooledModel, data: &SequenceSet) -> Result<f64> {
    let yhat = model.predict(&data.inputs)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let y = data
            .sequences
            .row(i)
            .to_owned()
            .into_shape_with_order(yhat.dim())
            .expect("scalar sequences");
        total += mtds::model::gaussian_loglik(y.view(), yhat.view(), model.s())
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtds::dho::make_dataset;

    #[test]
    fn pooled_training_is_deterministic_and_improves() {
        let (train, _) = make_dataset(8, 0, 3);
        let config = PooledTrainConfig {
            epochs: 300,
            ..PooledTrainConfig::default()
        };
        let a = train_pooled(&train, &config).unwrap();
        let b = train_pooled(&train, &config).unwrap();
        assert_eq!(a, b);
        let trained = pooled_loglik(&a, &train).unwrap();
        let fresh = train_pooled(
            &train,
            &PooledTrainConfig {
                epochs: 1,
                ..PooledTrainConfig::default()
            },
        )
        .unwrap();
        assert!(trained > pooled_loglik(&fresh, &train).unwrap());
    }

    #[test]
    fn single_task_pooled_fits_well() {
        // a pooled model on one task is just maximum likelihood for that
        // task; the mean trajectory should be recovered to noise level
        let (train, _) = make_dataset(1, 0, 17);
        let model = train_pooled(
            &train,
            &PooledTrainConfig {
                epochs: 3000,
                ..PooledTrainConfig::default()
            },
        )
        .unwrap();
        let yhat = model.predict(&train.inputs).unwrap();
        let mut sq = 0.0;
        for t in 0..train.seq_len() {
            let r = train.sequences[[0, t]] - yhat[[t, 0]];
            sq += r * r;
        }
        let rmse = (sq / train.seq_len() as f64).sqrt();
        assert!(rmse < 0.1, "single-task pooled rmse {rmse}");
    }
}
