//! Adaptive importance sampling against a conjugate linear-Gaussian target,
//! where the exact posterior is available in closed form: prior N(0, I_d),
//! observation b = H x + noise with N(0, sigma^2 I), posterior
//! covariance (I + H^T H / sigma^2)^-1 and mean cov * H^T b / sigma^2.
//! The analytic side is computed with nalgebra, independent of the library.

mod common;

use common::*;
use mtds::infer::{adais_refine, weighted_moments, AdaisHyper, LogTarget, MoGPosterior};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

struct ConjugateTarget {
    h: Array2<f64>,
    b: Array1<f64>,
    sigma: f64,
}

impl LogTarget for ConjugateTarget {
    fn dim(&self) -> usize {
        self.h.ncols()
    }

    fn log_density(&self, points: ArrayView2<'_, f64>) -> Vec<f64> {
        points
            .rows()
            .into_iter()
            .map(|x| {
                let prior: f64 = x.iter().map(|v| -0.5 * v * v).sum();
                let r = &self.b - &self.h.dot(&x);
                let lik: f64 =
                    r.iter().map(|v| -0.5 * v * v / (self.sigma * self.sigma)).sum();
                prior + lik
            })
            .collect()
    }
}

struct AnalyticPosterior {
    mean: Array1<f64>,
    cov: Array2<f64>,
}

fn analytic_posterior(target: &ConjugateTarget) -> AnalyticPosterior {
    let d = target.dim();
    let r = target.h.nrows();
    let h = nalgebra::DMatrix::from_fn(r, d, |i, j| target.h[[i, j]]);
    let b = nalgebra::DVector::from_fn(r, |i, _| target.b[i]);
    let precision = nalgebra::DMatrix::identity(d, d) + h.transpose() * &h / (target.sigma * target.sigma);
    let cov = precision.try_inverse().expect("SPD precision");
    let mean = &cov * h.transpose() * b / (target.sigma * target.sigma);
    AnalyticPosterior {
        mean: Array1::from_iter(mean.iter().copied()),
        cov: Array2::from_shape_fn((d, d), |(i, j)| cov[(i, j)]),
    }
}

fn check_dimension(d: usize, seed: u64) {
    let mut rng = seeded(seed);
    let target = ConjugateTarget {
        h: random_mat(d, d, 1.0, &mut rng),
        b: random_vec(d, 1.5, &mut rng),
        sigma: 1.0,
    };
    let truth = analytic_posterior(&target);

    let prior = MoGPosterior::single(Array1::zeros(d), Array2::eye(d)).unwrap();
    let hyper = AdaisHyper::default();
    let res = adais_refine(&target, &prior, true, &hyper, &mut rng).unwrap();

    assert!(res.converged, "d = {d}: did not reach the ESS threshold");
    let last_ess = *res.ess_trace.last().unwrap();
    assert!(
        last_ess >= hyper.m_ess,
        "d = {d}: accepted with ESS {last_ess}"
    );

    // moments from the importance-corrected final sample set
    let (mean, cov) = weighted_moments(res.samples.view(), &res.weights);
    for i in 0..d {
        let sd = truth.cov[[i, i]].sqrt();
        let err = (mean[i] - truth.mean[i]).abs();
        assert!(
            err < 0.05 * sd,
            "d = {d} coord {i}: mean error {err} vs 5% of sd {sd}"
        );
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = cov[[i, j]] - truth.cov[[i, j]];
            num += e * e;
            den += truth.cov[[i, j]] * truth.cov[[i, j]];
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel < 0.10, "d = {d}: covariance Frobenius error {rel}");
}

#[test]
fn conjugate_posterior_k1() {
    check_dimension(1, 101);
}

#[test]
fn conjugate_posterior_k2() {
    check_dimension(2, 202);
}

#[test]
fn conjugate_posterior_k4() {
    check_dimension(4, 404);
}

#[test]
fn offset_target_moves_the_proposal() {
    // prior far from the posterior: the adaptation must travel
    let d = 2;
    let mut rng = seeded(777);
    let target = ConjugateTarget {
        h: Array2::eye(d) * 3.0,
        b: Array1::from(vec![9.0, -6.0]), // posterior mean near (2.7, -1.8)
        sigma: 1.0,
    };
    let truth = analytic_posterior(&target);
    let prior = MoGPosterior::single(Array1::zeros(d), Array2::eye(d)).unwrap();
    let res = adais_refine(&target, &prior, true, &AdaisHyper::default(), &mut rng).unwrap();
    assert!(res.converged, "ess trace {:?}", res.ess_trace);
    let (mean, _) = weighted_moments(res.samples.view(), &res.weights);
    for i in 0..d {
        assert!((mean[i] - truth.mean[i]).abs() < 0.05 * truth.cov[[i, i]].sqrt());
    }
}
