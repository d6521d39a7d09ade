//! Posterior-predictive rollouts, interval bands, and RMSE/NLL metrics.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;

use super::mog::MoGPosterior;
use crate::model::{realize_lds, realize_rnn, rollout_lds, rollout_rnn, BaseModel, HyperNetParams, LatentCode, ModelDims};
use crate::{Error, Result};

const LOG_2PI: f64 = 1.8378770664093453;

/// Monte Carlo posterior predictive: `s_count` noiseless rollouts drawn
/// from the posterior over `(z, log s)`, each paired with its emission
/// std-dev. The predictive density at a step is the equal-weight Gaussian
/// mixture over samples.
#[derive(Debug, Clone)]
pub struct PosteriorPredictive {
    /// s_count x T x p rollout outputs.
    pub trajectories: Array3<f64>,
    /// Emission std-dev per sample.
    pub noise_sd: Vec<f64>,
}

impl PosteriorPredictive {
    pub fn n_samples(&self) -> usize {
        self.trajectories.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.trajectories.shape()[1]
    }

    /// Per-step mean of the rollout outputs.
    pub fn mean(&self) -> Array2<f64> {
        let (s, t, p) = (
            self.trajectories.shape()[0],
            self.trajectories.shape()[1],
            self.trajectories.shape()[2],
        );
        let mut out = Array2::zeros((t, p));
        for si in 0..s {
            for ti in 0..t {
                for pi in 0..p {
                    out[[ti, pi]] += self.trajectories[[si, ti, pi]];
                }
            }
        }
        out / s as f64
    }

    /// Per-step std-dev of the predictive mixture (spread of the rollout
    /// means plus emission noise).
    pub fn sd(&self) -> Array2<f64> {
        let (s, t, p) = (
            self.trajectories.shape()[0],
            self.trajectories.shape()[1],
            self.trajectories.shape()[2],
        );
        let mean = self.mean();
        let mut out = Array2::zeros((t, p));
        for si in 0..s {
            for ti in 0..t {
                for pi in 0..p {
                    let d = self.trajectories[[si, ti, pi]] - mean[[ti, pi]];
                    out[[ti, pi]] += d * d + self.noise_sd[si] * self.noise_sd[si];
                }
            }
        }
        (out / s as f64).mapv(f64::sqrt)
    }

    /// Quantile of the mixture `1/S sum_s N(yhat_s, sd_s^2)` at step `t`,
    /// output `j`, by bisection on the mixture CDF.
    pub fn quantile(&self, t: usize, j: usize, q: f64) -> f64 {
        let s = self.n_samples();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for si in 0..s {
            let m = self.trajectories[[si, t, j]];
            let sd = self.noise_sd[si];
            lo = lo.min(m - 10.0 * sd);
            hi = hi.max(m + 10.0 * sd);
        }
        let cdf = |x: f64| {
            (0..s)
                .map(|si| {
                    std_normal_cdf((x - self.trajectories[[si, t, j]]) / self.noise_sd[si])
                })
                .sum::<f64>()
                / s as f64
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 * (1.0 + hi.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Draw `(z, log s)` samples from `q`, roll out the realized system over
/// the full input sequence, and aggregate.
pub fn posterior_predictive(
    q: &MoGPosterior,
    phi: &HyperNetParams,
    dims: ModelDims,
    base: BaseModel,
    u: ArrayView2<'_, f64>,
    s_count: usize,
    rng: &mut impl Rng,
) -> Result<PosteriorPredictive> {
    if s_count == 0 {
        return Err(Error::Domain("posterior predictive: need s_count >= 1".into()));
    }
    if q.dim() != dims.k + 1 {
        return Err(Error::Dimension(format!(
            "posterior predictive: q over {} dims, expected k+1 = {}",
            q.dim(),
            dims.k + 1
        )));
    }
    let steps = u.nrows();
    let mut trajectories = Array3::zeros((s_count, steps, dims.p));
    let mut noise_sd = Vec::with_capacity(s_count);
    for si in 0..s_count {
        let zeta = q.sample(rng);
        let z = LatentCode(zeta.slice(ndarray::s![..dims.k]).to_owned());
        let log_s = zeta[dims.k];
        let (raw, _) = phi.forward(&z);
        let predictions = match base {
            BaseModel::Lds => {
                let (real, _) = realize_lds(raw.view(), dims.n, dims.m, dims.p, log_s)?;
                rollout_lds(&real, u).predictions
            }
            BaseModel::Rnn => {
                let real = realize_rnn(raw.view(), dims.n, dims.m, dims.p, log_s)?;
                rollout_rnn(&real, u).predictions
            }
        };
        for ti in 0..steps {
            for pi in 0..dims.p {
                trajectories[[si, ti, pi]] = predictions[[ti, pi]];
            }
        }
        noise_sd.push(log_s.exp());
    }
    Ok(PosteriorPredictive {
        trajectories,
        noise_sd,
    })
}

/// Predictive RMSE and per-frame NLL over the horizon starting at step
/// `start` (0-based): `truth` rows align with steps `start..start+h`.
///
/// `rmse = sqrt(mean_t (y_t - mean_t)^2)`;
/// `nll = -(1/h) sum_t log[(1/S) sum_s N(y_t; yhat_t^(s), sd_s^2)]`.
pub fn metrics_rmse_nll(
    truth: ArrayView2<'_, f64>,
    pred: &PosteriorPredictive,
    start: usize,
) -> Result<(f64, f64)> {
    let h = truth.nrows();
    let p = truth.ncols();
    if h == 0 {
        return Err(Error::Dimension("metrics: empty horizon".into()));
    }
    if start + h > pred.steps() || p != pred.trajectories.shape()[2] {
        return Err(Error::Dimension(format!(
            "metrics: horizon {h} from {start} does not fit predictive with {} steps",
            pred.steps()
        )));
    }
    let s = pred.n_samples();
    let mean = pred.mean();
    let mut sq = 0.0;
    let mut nll = 0.0;
    for ti in 0..h {
        let mut frame_terms = Vec::with_capacity(s);
        for si in 0..s {
            let sd = pred.noise_sd[si];
            let mut log_n = 0.0;
            for pi in 0..p {
                let r = truth[[ti, pi]] - pred.trajectories[[si, start + ti, pi]];
                log_n += -0.5 * LOG_2PI - sd.ln() - 0.5 * r * r / (sd * sd);
            }
            frame_terms.push(log_n);
        }
        let max = frame_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lme = max + (frame_terms.iter().map(|t| (t - max).exp()).sum::<f64>() / s as f64).ln();
        nll -= lme;
        for pi in 0..p {
            let r = truth[[ti, pi]] - mean[[start + ti, pi]];
            sq += r * r;
        }
    }
    Ok(((sq / (h * p) as f64).sqrt(), nll / h as f64))
}

/// Standard normal CDF (Zelen-Severo polynomial, |err| < 7.5e-8).
pub fn std_normal_cdf(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - std_normal_cdf(-x);
    }
    let t = 1.0 / (1.0 + 0.2316419 * x);
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    1.0 - pdf * poly
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn point_predictive(values: &[f64], sd: f64) -> PosteriorPredictive {
        let t = values.len();
        let mut traj = Array3::zeros((1, t, 1));
        for (ti, v) in values.iter().enumerate() {
            traj[[0, ti, 0]] = *v;
        }
        PosteriorPredictive {
            trajectories: traj,
            noise_sd: vec![sd],
        }
    }

    #[test]
    fn perfect_point_prediction_has_zero_rmse() {
        let pred = point_predictive(&[1.0, -0.5, 0.3], 0.1);
        let truth = array![[1.0], [-0.5], [0.3]];
        let (rmse, _) = metrics_rmse_nll(truth.view(), &pred, 0).unwrap();
        assert_eq!(rmse, 0.0);
    }

    #[test]
    fn single_sample_nll_is_negative_log_density() {
        // zero residual, sd = 0.1: nll = 0.5 log(2 pi 0.01) = -1.3836465597893728
        let pred = point_predictive(&[0.0], 0.1);
        let truth = array![[0.0]];
        let (_, nll) = metrics_rmse_nll(truth.view(), &pred, 0).unwrap();
        assert!((nll - (-1.3836465597893728)).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_rmse_squared_is_variance() {
        // truth varies, prediction is the mean of the truth
        let data = [0.4, -0.2, 0.9, -0.7, 0.1, 0.5, -0.3, 0.05];
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let pred = point_predictive(&vec![mean; data.len()], 0.1);
        let truth =
            Array2::from_shape_vec((data.len(), 1), data.to_vec()).unwrap();
        let (rmse, _) = metrics_rmse_nll(truth.view(), &pred, 0).unwrap();
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        assert!((rmse * rmse - var).abs() < 1e-12);
    }

    #[test]
    fn quantiles_bracket_the_mean() {
        let pred = point_predictive(&[2.0], 0.5);
        let lo = pred.quantile(0, 0, 0.025);
        let hi = pred.quantile(0, 0, 0.975);
        assert!((lo - (2.0 - 1.959963984540054 * 0.5)).abs() < 1e-4);
        assert!((hi - (2.0 + 1.959963984540054 * 0.5)).abs() < 1e-4);
        assert!(lo < 2.0 && 2.0 < hi);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((std_normal_cdf(1.959963984540054) - 0.975).abs() < 1e-7);
        assert!((std_normal_cdf(-1.959963984540054) - 0.025).abs() < 1e-7);
    }
}
