//! The hypernetwork `h_phi`: a fixed feature layer, one sigmoid hidden
//! layer, and an affine output producing the raw parameter vector.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BaseModel, ModelDims};
use crate::paramspace::sigmoid;
use crate::{Error, Result};

/// Per-task latent code `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Array1<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Hypernetwork weights plus the global log emission std-dev, which is
/// learned as a constant with respect to `z`.
///
/// Flat layout (used by the optimizer and checkpoints):
/// `[hidden_weights row-major, hidden_bias, out_weights row-major, out_bias, log_s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperNetParams {
    /// (3k+1) x H
    pub hidden_weights: Array2<f64>,
    /// H
    pub hidden_bias: Array1<f64>,
    /// H x d_raw
    pub out_weights: Array2<f64>,
    /// d_raw
    pub out_bias: Array1<f64>,
    /// Global log emission std-dev.
    pub log_s: f64,
}

impl HyperNetParams {
    pub fn zeros(dims: ModelDims, base: BaseModel) -> Self {
        let f = dims.feature_len();
        let d_raw = dims.raw_len(base);
        Self {
            hidden_weights: Array2::zeros((f, dims.h)),
            hidden_bias: Array1::zeros(dims.h),
            out_weights: Array2::zeros((dims.h, d_raw)),
            out_bias: Array1::zeros(d_raw),
            log_s: 0.0,
        }
    }

    /// Random initialization. The hidden layer gets uniform Glorot weights;
    /// the output layer is scaled down so every task starts near the raw
    /// bias vector. For the LDS the pre-tanh singular magnitudes start at
    /// 1.5 (slowly decaying dynamics) rather than 0, which would make the
    /// initial state contraction kill the gradient signal at long horizons.
    pub fn init(dims: ModelDims, base: BaseModel, rng: &mut impl Rng) -> Self {
        let f = dims.feature_len();
        let d_raw = dims.raw_len(base);
        let a_hidden = (6.0 / (f + dims.h) as f64).sqrt();
        let a_out = 0.1 * (6.0 / (dims.h + d_raw) as f64).sqrt();
        let mut params = Self {
            hidden_weights: Array2::from_shape_fn((f, dims.h), |_| {
                rng.random_range(-a_hidden..a_hidden)
            }),
            hidden_bias: Array1::zeros(dims.h),
            out_weights: Array2::from_shape_fn((dims.h, d_raw), |_| {
                rng.random_range(-a_out..a_out)
            }),
            out_bias: Array1::zeros(d_raw),
            log_s: -1.0,
        };
        if base == BaseModel::Lds {
            for i in 0..dims.n {
                params.out_bias[i] = 1.5;
            }
        }
        params
    }

    pub fn check_dims(&self, dims: ModelDims, base: BaseModel) -> Result<()> {
        let f = dims.feature_len();
        let d_raw = dims.raw_len(base);
        if self.hidden_weights.dim() != (f, dims.h)
            || self.hidden_bias.len() != dims.h
            || self.out_weights.dim() != (dims.h, d_raw)
            || self.out_bias.len() != d_raw
        {
            return Err(Error::Dimension(format!(
                "hypernet params do not match dims {dims:?} / base {base:?}"
            )));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.hidden_weights.len() + self.hidden_bias.len() + self.out_weights.len()
            + self.out_bias.len()
            + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend(self.hidden_weights.iter());
        flat.extend(self.hidden_bias.iter());
        flat.extend(self.out_weights.iter());
        flat.extend(self.out_bias.iter());
        flat.push(self.log_s);
        flat
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut out = self.clone();
        out.assign_flat(flat);
        Ok(out)
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self.hidden_weights.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.hidden_bias.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.out_weights.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in self.out_bias.iter_mut() {
            *v = it.next().unwrap();
        }
        self.log_s = it.next().unwrap();
    }

    /// `self += c * other`; used to accumulate gradients.
    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        self.hidden_weights.scaled_add(c, &other.hidden_weights);
        self.hidden_bias.scaled_add(c, &other.hidden_bias);
        self.out_weights.scaled_add(c, &other.out_weights);
        self.out_bias.scaled_add(c, &other.out_bias);
        self.log_s += c * other.log_s;
    }

    pub fn scale(&mut self, c: f64) {
        self.hidden_weights.mapv_inplace(|v| v * c);
        self.hidden_bias.mapv_inplace(|v| v * c);
        self.out_weights.mapv_inplace(|v| v * c);
        self.out_bias.mapv_inplace(|v| v * c);
        self.log_s *= c;
    }

    pub fn grad_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fixed feature map `z -> [z; sin z; cos z; |z|]`.
pub fn featurize(z: ArrayView1<'_, f64>) -> Array1<f64> {
    let k = z.len();
    let mut f = Array1::zeros(3 * k + 1);
    for (j, &zj) in z.iter().enumerate() {
        f[j] = zj;
        f[k + j] = zj.sin();
        f[2 * k + j] = zj.cos();
    }
    f[3 * k] = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    f
}

/// Adjoint of [`featurize`]. The norm term uses the subgradient 0 at z = 0.
pub fn featurize_backward(z: ArrayView1<'_, f64>, f_bar: ArrayView1<'_, f64>) -> Array1<f64> {
    let k = z.len();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut z_bar = Array1::zeros(k);
    for j in 0..k {
        let mut g = f_bar[j];
        g += z[j].cos() * f_bar[k + j];
        g -= z[j].sin() * f_bar[2 * k + j];
        if norm > 0.0 {
            g += z[j] / norm * f_bar[3 * k];
        }
        z_bar[j] = g;
    }
    z_bar
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HypernetCache {
    pub features: Array1<f64>,
    pub hidden: Array1<f64>,
}

impl HyperNetParams {
    /// `raw = W_out^T sigmoid(W_hidden^T f(z) + b_hidden) + b_out`.
    pub fn forward(&self, z: &LatentCode) -> (Array1<f64>, HypernetCache) {
        let features = featurize(z.0.view());
        let hidden = (self.hidden_weights.t().dot(&features) + &self.hidden_bias).mapv(sigmoid);
        let raw = self.out_weights.t().dot(&hidden) + &self.out_bias;
        (raw, HypernetCache { features, hidden })
    }

    /// Reverse-mode through the network. Returns the parameter gradient
    /// (with `log_s` field zero; the loss side owns that) and the gradient
    /// with respect to `z`.
    pub fn backward(
        &self,
        z: &LatentCode,
        cache: &HypernetCache,
        raw_bar: ArrayView1<'_, f64>,
    ) -> (HyperNetParams, Array1<f64>) {
        let out_weights_bar = outer(&cache.hidden, &raw_bar.to_owned());
        let hidden_bar = self.out_weights.dot(&raw_bar);
        let preact_bar = &hidden_bar * &cache.hidden.mapv(|h| h * (1.0 - h));
        let hidden_weights_bar = outer(&cache.features, &preact_bar);
        let features_bar = self.hidden_weights.dot(&preact_bar);
        let z_bar = featurize_backward(z.0.view(), features_bar.view());
        let grad = HyperNetParams {
            hidden_weights: hidden_weights_bar,
            hidden_bias: preact_bar,
            out_weights: out_weights_bar,
            out_bias: raw_bar.to_owned(),
            log_s: 0.0,
        };
        (grad, z_bar)
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (ra, rb) = (a.len(), b.len());
    let mut out = Array2::zeros((ra, rb));
    for i in 0..ra {
        let ai = a[i];
        for j in 0..rb {
            out[[i, j]] = ai * b[j];
        }
    }
    out
}
