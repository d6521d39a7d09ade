//! Deterministic rollouts, the Gaussian observation log-likelihood, and
//! backpropagation through time. All `T` states are stored; at desk scale
//! (T = 80) checkpointed recomputation buys nothing.

use ndarray::{Array1, Array2, ArrayView2};

use super::hypernet::{HyperNetParams, LatentCode};
use super::realize::{
    realize_lds, realize_lds_backward, realize_rnn, realize_rnn_backward, LdsRealization,
    RnnRealization, SystemGrad,
};
use super::{BaseModel, ModelDims};
use crate::{Error, Result};

const LOG_2PI: f64 = 1.8378770664093453;

/// States `x_{1:T}` and predictions `yhat_{1:T}` of one rollout from
/// `x_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// T x n
    pub states: Array2<f64>,
    /// T x p
    pub predictions: Array2<f64>,
}

/// `x_t = A x_{t-1} + B u_t + bias; yhat_t = C x_t + d`.
pub fn rollout_lds(params: &LdsRealization, u: ArrayView2<'_, f64>) -> RolloutResult {
    let steps = u.nrows();
    let n = params.a.nrows();
    let p = params.c.nrows();
    let mut states = Array2::zeros((steps, n));
    let mut predictions = Array2::zeros((steps, p));
    let mut x = Array1::<f64>::zeros(n);
    for t in 0..steps {
        x = params.a.dot(&x) + params.b.dot(&u.row(t)) + &params.bias;
        states.row_mut(t).assign(&x);
        predictions
            .row_mut(t)
            .assign(&(params.c.dot(&x) + &params.d));
    }
    RolloutResult {
        states,
        predictions,
    }
}

/// `x_t = tanh(A x_{t-1} + B u_t + bias)`; emission as in the linear case.
pub fn rollout_rnn(params: &RnnRealization, u: ArrayView2<'_, f64>) -> RolloutResult {
    let steps = u.nrows();
    let n = params.a.nrows();
    let p = params.c.nrows();
    let mut states = Array2::zeros((steps, n));
    let mut predictions = Array2::zeros((steps, p));
    let mut x = Array1::<f64>::zeros(n);
    for t in 0..steps {
        x = (params.a.dot(&x) + params.b.dot(&u.row(t)) + &params.bias).mapv(f64::tanh);
        states.row_mut(t).assign(&x);
        predictions
            .row_mut(t)
            .assign(&(params.c.dot(&x) + &params.d));
    }
    RolloutResult {
        states,
        predictions,
    }
}

/// `sum_{t,j} [ -0.5 log(2 pi s^2) - (y - yhat)^2 / (2 s^2) ]`.
pub fn gaussian_loglik(
    y: ArrayView2<'_, f64>,
    yhat: ArrayView2<'_, f64>,
    s: f64,
) -> Result<f64> {
    if s <= 0.0 {
        return Err(Error::Domain(format!("gaussian_loglik: s = {s} must be > 0")));
    }
    if y.dim() != yhat.dim() {
        return Err(Error::Dimension(format!(
            "gaussian_loglik: y is {:?}, yhat is {:?}",
            y.dim(),
            yhat.dim()
        )));
    }
    let count = y.len() as f64;
    let inv_two_var = 0.5 / (s * s);
    let mut sq = 0.0;
    for (a, b) in y.iter().zip(yhat.iter()) {
        let r = a - b;
        sq += r * r;
    }
    Ok(count * (-0.5 * LOG_2PI - s.ln()) - sq * inv_two_var)
}

/// Gradient of [`gaussian_loglik`] with respect to `yhat` and `log s`.
pub fn gaussian_loglik_backward(
    y: ArrayView2<'_, f64>,
    yhat: ArrayView2<'_, f64>,
    s: f64,
) -> (Array2<f64>, f64) {
    let inv_var = 1.0 / (s * s);
    let residual = &y.to_owned() - &yhat;
    let d_log_s = residual.iter().map(|r| r * r).sum::<f64>() * inv_var - y.len() as f64;
    (residual.mapv(|r| r * inv_var), d_log_s)
}

/// BPTT through the linear rollout: upstream gradient on the predictions
/// back to the system matrices.
pub fn rollout_lds_backward(
    params: &LdsRealization,
    u: ArrayView2<'_, f64>,
    rollout: &RolloutResult,
    yhat_bar: ArrayView2<'_, f64>,
) -> SystemGrad {
    let steps = u.nrows();
    let n = params.a.nrows();
    let (m, p) = (params.b.ncols(), params.c.nrows());
    let mut grad = SystemGrad::zeros(n, m, p);
    let mut lambda = Array1::<f64>::zeros(n);
    for t in (0..steps).rev() {
        let g = yhat_bar.row(t);
        let x = rollout.states.row(t);
        for i in 0..p {
            for j in 0..n {
                grad.c[[i, j]] += g[i] * x[j];
            }
            grad.d[i] += g[i];
        }
        let dx = params.c.t().dot(&g) + &lambda;
        if t > 0 {
            let x_prev = rollout.states.row(t - 1);
            for i in 0..n {
                for j in 0..n {
                    grad.a[[i, j]] += dx[i] * x_prev[j];
                }
            }
        }
        let ut = u.row(t);
        for i in 0..n {
            for j in 0..m {
                grad.b[[i, j]] += dx[i] * ut[j];
            }
            grad.bias[i] += dx[i];
        }
        lambda = params.a.t().dot(&dx);
    }
    grad
}

/// BPTT through the tanh rollout.
pub fn rollout_rnn_backward(
    params: &RnnRealization,
    u: ArrayView2<'_, f64>,
    rollout: &RolloutResult,
    yhat_bar: ArrayView2<'_, f64>,
) -> SystemGrad {
    let steps = u.nrows();
    let n = params.a.nrows();
    let (m, p) = (params.b.ncols(), params.c.nrows());
    let mut grad = SystemGrad::zeros(n, m, p);
    let mut lambda = Array1::<f64>::zeros(n);
    for t in (0..steps).rev() {
        let g = yhat_bar.row(t);
        let x = rollout.states.row(t);
        for i in 0..p {
            for j in 0..n {
                grad.c[[i, j]] += g[i] * x[j];
            }
            grad.d[i] += g[i];
        }
        let dx = params.c.t().dot(&g) + &lambda;
        let dpre = Array1::from_iter((0..n).map(|i| dx[i] * (1.0 - x[i] * x[i])));
        if t > 0 {
            let x_prev = rollout.states.row(t - 1);
            for i in 0..n {
                for j in 0..n {
                    grad.a[[i, j]] += dpre[i] * x_prev[j];
                }
            }
        }
        let ut = u.row(t);
        for i in 0..n {
            for j in 0..m {
                grad.b[[i, j]] += dpre[i] * ut[j];
            }
            grad.bias[i] += dpre[i];
        }
        lambda = params.a.t().dot(&dpre);
    }
    grad
}

/// Exact gradient of `log p(Y | U, h_phi(z))` with respect to the
/// hypernetwork parameters (including `log_s`) and the latent code.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub phi: HyperNetParams,
    pub z: Array1<f64>,
    pub loglik: f64,
}

pub fn loss_backward(
    phi: &HyperNetParams,
    dims: ModelDims,
    base: BaseModel,
    z: &LatentCode,
    u: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Result<LossGrad> {
    let (raw, net_cache) = phi.forward(z);
    let (raw_bar, loglik, d_log_s) = match base {
        BaseModel::Lds => {
            let (real, cache) = realize_lds(raw.view(), dims.n, dims.m, dims.p, phi.log_s)?;
            let roll = rollout_lds(&real, u);
            let loglik = gaussian_loglik(y, roll.predictions.view(), real.s)?;
            let (yhat_bar, d_log_s) = gaussian_loglik_backward(y, roll.predictions.view(), real.s);
            let sys = rollout_lds_backward(&real, u, &roll, yhat_bar.view());
            (realize_lds_backward(&cache, &sys), loglik, d_log_s)
        }
        BaseModel::Rnn => {
            let real = realize_rnn(raw.view(), dims.n, dims.m, dims.p, phi.log_s)?;
            let roll = rollout_rnn(&real, u);
            let loglik = gaussian_loglik(y, roll.predictions.view(), real.s)?;
            let (yhat_bar, d_log_s) = gaussian_loglik_backward(y, roll.predictions.view(), real.s);
            let sys = rollout_rnn_backward(&real, u, &roll, yhat_bar.view());
            (realize_rnn_backward(&sys), loglik, d_log_s)
        }
    };
    let (mut grad_phi, z_bar) = phi.backward(z, &net_cache, raw_bar.view());
    grad_phi.log_s = d_log_s;
    Ok(LossGrad {
        phi: grad_phi,
        z: z_bar,
        loglik,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn impulse(steps: usize) -> Array2<f64> {
        let mut u = Array2::zeros((steps, 1));
        u[[0, 0]] = 1.0;
        u
    }

    #[test]
    fn memoryless_system_echoes_inputs() {
        let params = LdsRealization {
            a: Array2::zeros((2, 2)),
            b: Array2::eye(2),
            bias: Array1::zeros(2),
            c: Array2::eye(2),
            d: Array1::zeros(2),
            s: 1.0,
        };
        let u = array![[1.0, 2.0], [3.0, -4.0], [0.0, 0.5]];
        let out = rollout_lds(&params, u.view());
        assert_eq!(out.states, u);
        assert_eq!(out.predictions, u);
    }

    #[test]
    fn zero_drive_emits_constant_offset() {
        let params = LdsRealization {
            a: Array2::eye(2) * 0.5,
            b: array![[1.0], [0.0]],
            bias: Array1::zeros(2),
            c: array![[1.0, 1.0]],
            d: array![0.7],
            s: 1.0,
        };
        let u = Array2::zeros((5, 1));
        let out = rollout_lds(&params, u.view());
        assert!(out.predictions.iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn scalar_impulse_response_is_geometric() {
        let a = 0.8;
        let params = LdsRealization {
            a: array![[a]],
            b: array![[1.0]],
            bias: array![0.0],
            c: array![[1.0]],
            d: array![0.0],
            s: 1.0,
        };
        let out = rollout_lds(&params, impulse(6).view());
        for t in 0..6 {
            assert!((out.predictions[[t, 0]] - a.powi(t as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn rnn_zero_dynamics_emits_offset() {
        let params = RnnRealization {
            a: Array2::zeros((2, 2)),
            b: Array2::zeros((2, 1)),
            bias: Array1::zeros(2),
            c: array![[1.0, 0.0]],
            d: array![0.3],
            s: 1.0,
        };
        let out = rollout_rnn(&params, impulse(4).view());
        assert!(out.states.iter().all(|v| *v == 0.0));
        assert!(out.predictions.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn rnn_states_are_bounded_by_one() {
        let params = RnnRealization {
            a: array![[3.0, -2.0], [5.0, 1.0]],
            b: array![[4.0], [-7.0]],
            bias: array![2.0, -1.0],
            c: array![[1.0, 1.0]],
            d: array![0.0],
            s: 1.0,
        };
        let mut u = Array2::zeros((10, 1));
        u.fill(2.5);
        let out = rollout_rnn(&params, u.view());
        assert!(out.states.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rnn_matches_linear_to_first_order() {
        let scale = 1e-3;
        let lds = LdsRealization {
            a: array![[0.5]],
            b: array![[1.0]],
            bias: array![0.0],
            c: array![[1.0]],
            d: array![0.0],
            s: 1.0,
        };
        let rnn = RnnRealization {
            a: lds.a.clone(),
            b: lds.b.clone(),
            bias: lds.bias.clone(),
            c: lds.c.clone(),
            d: lds.d.clone(),
            s: 1.0,
        };
        let mut u = impulse(6);
        u[[0, 0]] = scale; // keeps every pre-activation below 1e-2
        let lin = rollout_lds(&lds, u.view());
        let non = rollout_rnn(&rnn, u.view());
        for t in 0..6 {
            assert!((lin.predictions[[t, 0]] - non.predictions[[t, 0]]).abs() < 1e-3 * scale);
        }
    }

    #[test]
    fn loglik_constant_term_matches_closed_form() {
        // T = 80, p = 1, s = 0.05, zero residuals:
        // 80 * (-0.5 ln(2 pi 0.0025)) = 166.14349922794545
        let y = Array2::zeros((80, 1));
        let ll = gaussian_loglik(y.view(), y.view(), 0.05).unwrap();
        assert!((ll - 166.14349922794545).abs() < 1e-10);
    }

    #[test]
    fn doubling_s_costs_log2_per_point() {
        let y = Array2::zeros((80, 1));
        let a = gaussian_loglik(y.view(), y.view(), 0.05).unwrap();
        let b = gaussian_loglik(y.view(), y.view(), 0.10).unwrap();
        assert!((a - b - 80.0 * std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn single_standard_normal_residual() {
        let y = array![[1.3]];
        let yhat = array![[0.0]];
        let ll = gaussian_loglik(y.view(), yhat.view(), 1.0).unwrap();
        assert!((ll - (-0.5 * LOG_2PI - 0.5 * 1.3 * 1.3)).abs() < 1e-14);
    }

    #[test]
    fn nonpositive_s_is_domain_error() {
        let y = Array2::zeros((2, 1));
        assert!(gaussian_loglik(y.view(), y.view(), 0.0).is_err());
        assert!(gaussian_loglik(y.view(), y.view(), -1.0).is_err());
    }

    #[test]
    fn log_s_gradient_at_zero_residuals_is_minus_count() {
        let y = Array2::zeros((80, 1));
        let (_, d_log_s) = gaussian_loglik_backward(y.view(), y.view(), 0.05);
        assert!((d_log_s + 80.0).abs() < 1e-12);
    }

    #[test]
    fn rollouts_are_bitwise_deterministic() {
        let params = LdsRealization {
            a: array![[0.9, 0.05], [-0.05, 0.9]],
            b: array![[1.0], [0.5]],
            bias: array![0.01, -0.02],
            c: array![[1.0, -1.0]],
            d: array![0.1],
            s: 0.05,
        };
        let u = impulse(80);
        let a = rollout_lds(&params, u.view());
        let b = rollout_lds(&params, u.view());
        assert_eq!(a, b);
    }
}
