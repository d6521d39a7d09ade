//! Mixture-of-Gaussians proposals/posteriors and weighted EM.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{cholesky, cholesky_logdet};
use crate::{Error, Result};

const LOG_2PI: f64 = 1.8378770664093453;

/// One full-covariance Gaussian with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    chol: Array2<f64>,
    log_norm: f64,
}

impl GaussianComponent {
    /// Build a component; the covariance is symmetrized, and if it is not
    /// factorizable an escalating diagonal ridge is applied before failing.
    pub fn new(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.dim() != (d, d) {
            return Err(Error::Dimension(format!(
                "gaussian component: mean dim {d}, cov {:?}",
                cov.dim()
            )));
        }
        let mut sym = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                sym[[i, j]] = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            }
        }
        let scale = (0..d).map(|i| sym[[i, i]].abs()).sum::<f64>().max(1e-300) / d as f64;
        let mut ridge = 0.0;
        let chol = loop {
            match cholesky(sym.view()) {
                Ok(l) => break l,
                Err(_) if ridge < 1e-4 * scale => {
                    ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 10.0 };
                    for i in 0..d {
                        sym[[i, i]] += ridge;
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let log_norm = -0.5 * (d as f64) * LOG_2PI - 0.5 * cholesky_logdet(chol.view());
        Ok(Self {
            mean,
            cov: sym,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, x: ArrayView1<'_, f64>) -> f64 {
        let d = self.dim();
        // forward-substitute w = L^-1 (x - mean); quad form is |w|^2
        let mut w = Array1::zeros(d);
        for i in 0..d {
            let mut v = x[i] - self.mean[i];
            for j in 0..i {
                v -= self.chol[[i, j]] * w[j];
            }
            w[i] = v / self.chol[[i, i]];
        }
        self.log_norm - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Array1<f64> {
        let d = self.dim();
        let eps = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + &self.chol.dot(&eps)
    }

    /// Covariance scaled by `factor` (the proposal tilt).
    pub fn scaled_cov(&self, factor: f64) -> Result<Self> {
        Self::new(self.mean.clone(), &self.cov * factor)
    }
}

/// A mixture of Gaussians over the joint inference space.
#[derive(Debug, Clone)]
pub struct MoGPosterior {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

impl MoGPosterior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        if weights.len() != components.len() || components.is_empty() {
            return Err(Error::Dimension(
                "mixture: weights and components must align and be non-empty".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Domain("mixture: weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "mixture: weights sum to {total}, not 1"
            )));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::Dimension("mixture: components disagree on dim".into()));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn single(mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        Ok(Self {
            weights: vec![1.0],
            components: vec![GaussianComponent::new(mean, cov)?],
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn logpdf(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut terms: Vec<f64> = Vec::with_capacity(self.components.len());
        for (w, c) in self.weights.iter().zip(&self.components) {
            if *w > 0.0 {
                terms.push(w.ln() + c.logpdf(x));
            }
        }
        log_sum_exp(&terms)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Array1<f64> {
        let r: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if r < acc {
                pick = j;
                break;
            }
        }
        self.components[pick].sample(rng)
    }

    pub fn sample_n(&self, count: usize, rng: &mut impl Rng) -> Array2<f64> {
        let mut out = Array2::zeros((count, self.dim()));
        for i in 0..count {
            out.row_mut(i).assign(&self.sample(rng));
        }
        out
    }

    /// Every component covariance scaled by `factor`.
    pub fn tilted(&self, factor: f64) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| c.scaled_cov(factor))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.weights.clone(), components)
    }

    /// Overall mean and covariance (law of total covariance).
    pub fn moments(&self) -> (Array1<f64>, Array2<f64>) {
        let d = self.dim();
        let mut mean = Array1::zeros(d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            mean.scaled_add(*w, &c.mean);
        }
        let mut cov = Array2::zeros((d, d));
        for (w, c) in self.weights.iter().zip(&self.components) {
            let delta = &c.mean - &mean;
            for i in 0..d {
                for j in 0..d {
                    cov[[i, j]] += w * (c.cov[[i, j]] + delta[i] * delta[j]);
                }
            }
        }
        (mean, cov)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// How to initialize a weighted EM fit.
pub enum EmInit<'a> {
    /// Weighted kmeans++ seeding followed by Lloyd iterations.
    KmeansPlusPlus { iters: usize },
    /// Warm start from an existing mixture with the right component count.
    Warm(&'a MoGPosterior),
}

/// Result of a weighted EM fit.
pub struct EmFit {
    pub mixture: MoGPosterior,
    /// Weighted data log-likelihood before the first iteration and after
    /// each EM iteration.
    pub loglik_trace: Vec<f64>,
}

/// Weighted EM for a `j`-component Gaussian mixture over weighted samples.
///
/// The weighted data log-likelihood `sum_m w_m log q(x_m)` is non-decreasing
/// over the returned trace. A component that loses all responsibility mass
/// is re-seeded from the highest-weight sample (resetting the baseline).
/// For `j >= 2` each fitted covariance is floored by a ridge scaled to the
/// whole sample cloud, which keeps components from collapsing onto a
/// handful of effective samples (the unbounded-likelihood degeneracy);
/// should an iteration still regress beyond fp slack, EM stops early and
/// the previous iterate is returned. The `j = 1` fit is the exact
/// closed-form weighted moments, no ridge.
pub fn weighted_em(
    samples: ArrayView2<'_, f64>,
    weights: &[f64],
    j: usize,
    init: EmInit<'_>,
    em_iters: usize,
    rng: &mut impl Rng,
) -> Result<EmFit> {
    let (m, d) = samples.dim();
    if m < j {
        return Err(Error::Dimension(format!(
            "weighted em: {m} samples cannot support {j} components"
        )));
    }
    if weights.len() != m {
        return Err(Error::Dimension("weighted em: weight count mismatch".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-8 || weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Domain("weighted em: weights must be a simplex".into()));
    }

    let mut mixture = match init {
        EmInit::Warm(q) => {
            if q.n_components() != j || q.dim() != d {
                return Err(Error::Dimension(
                    "weighted em: warm start mixture has wrong shape".into(),
                ));
            }
            q.clone()
        }
        EmInit::KmeansPlusPlus { iters } => kmeans_init(samples, weights, j, iters, rng)?,
    };

    let (_, cloud_cov) = weighted_moments(samples, weights);
    let cloud_ridge = 1e-9 * (0..d).map(|i| cloud_cov[[i, i]]).sum::<f64>() / d as f64;

    let mut trace = Vec::with_capacity(em_iters + 1);
    let mut log_resp = Array2::zeros((m, j));
    let mut baseline = f64::NEG_INFINITY;
    let mut previous = mixture.clone();
    for _iter in 0..=em_iters {
        // E-step under the current mixture (also yields the objective).
        let mut loglik = 0.0;
        for mi in 0..m {
            let x = samples.row(mi);
            let mut terms = Vec::with_capacity(j);
            for (cj, comp) in mixture.components.iter().enumerate() {
                let w = mixture.weights[cj];
                let t = if w > 0.0 {
                    w.ln() + comp.logpdf(x)
                } else {
                    f64::NEG_INFINITY
                };
                log_resp[[mi, cj]] = t;
                terms.push(t);
            }
            let lse = log_sum_exp(&terms);
            loglik += weights[mi] * lse;
            for cj in 0..j {
                log_resp[[mi, cj]] -= lse;
            }
        }
        let slack = 1e-8 * (1.0 + loglik.abs());
        if loglik + slack < baseline {
            // degenerate ML (collapsing component): keep the last good iterate
            mixture = previous;
            break;
        }
        baseline = baseline.max(loglik);
        trace.push(loglik);
        if trace.len() > em_iters {
            break;
        }
        previous = mixture.clone();

        // M-step with sample weights folded into the responsibilities.
        let mut reseeded = false;
        let mut new_weights = vec![0.0; j];
        let mut new_comps = Vec::with_capacity(j);
        for cj in 0..j {
            let r: Vec<f64> = (0..m)
                .map(|mi| weights[mi] * log_resp[[mi, cj]].exp())
                .collect();
            let nj: f64 = r.iter().sum();
            if nj < 1e-12 {
                // dead component: re-seed at the highest-weight sample
                let top = weights
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                let (_, global_cov) = weighted_moments(samples, weights);
                new_comps.push(GaussianComponent::new(
                    samples.row(top).to_owned(),
                    global_cov,
                )?);
                new_weights[cj] = 1.0 / m as f64;
                reseeded = true;
                continue;
            }
            let mut mean = Array1::zeros(d);
            for mi in 0..m {
                mean.scaled_add(r[mi], &samples.row(mi));
            }
            mean /= nj;
            let mut cov = Array2::zeros((d, d));
            for mi in 0..m {
                let delta = &samples.row(mi) - &mean;
                let rw = r[mi] / nj;
                for a in 0..d {
                    for b in 0..d {
                        cov[[a, b]] += rw * delta[a] * delta[b];
                    }
                }
            }
            if j > 1 {
                for a in 0..d {
                    cov[[a, a]] += cloud_ridge;
                }
            }
            new_comps.push(GaussianComponent::new(mean, cov)?);
            new_weights[cj] = nj;
        }
        let wsum: f64 = new_weights.iter().sum();
        for w in new_weights.iter_mut() {
            *w /= wsum;
        }
        mixture = MoGPosterior::new(new_weights, new_comps)?;
        if reseeded {
            baseline = f64::NEG_INFINITY;
        }
    }

    debug_assert!(
        trace
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs())),
        "returned EM trace must be non-decreasing: {trace:?}"
    );
    Ok(EmFit {
        mixture,
        loglik_trace: trace,
    })
}

/// Weighted mean and covariance of the full sample set.
pub fn weighted_moments(
    samples: ArrayView2<'_, f64>,
    weights: &[f64],
) -> (Array1<f64>, Array2<f64>) {
    let (m, d) = samples.dim();
    let mut mean = Array1::zeros(d);
    for mi in 0..m {
        mean.scaled_add(weights[mi], &samples.row(mi));
    }
    let mut cov = Array2::zeros((d, d));
    for mi in 0..m {
        let delta = &samples.row(mi) - &mean;
        for a in 0..d {
            for b in 0..d {
                cov[[a, b]] += weights[mi] * delta[a] * delta[b];
            }
        }
    }
    (mean, cov)
}

/// Weighted kmeans++ seeding plus Lloyd iterations, then one M-step to turn
/// the partition into a mixture.
fn kmeans_init(
    samples: ArrayView2<'_, f64>,
    weights: &[f64],
    j: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<MoGPosterior> {
    let (m, d) = samples.dim();
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(j);
    centers.push(samples.row(sample_index(weights, rng)).to_owned());
    let mut dist2 = vec![0.0; m];
    while centers.len() < j {
        let mut probs = vec![0.0; m];
        let mut total = 0.0;
        for mi in 0..m {
            let mut best = f64::INFINITY;
            for c in &centers {
                let dd: f64 = samples
                    .row(mi)
                    .iter()
                    .zip(c.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                best = best.min(dd);
            }
            dist2[mi] = best;
            probs[mi] = weights[mi] * best;
            total += probs[mi];
        }
        if total <= 0.0 {
            // all points coincide with a center; duplicate the top sample
            centers.push(samples.row(sample_index(weights, rng)).to_owned());
            continue;
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
        centers.push(samples.row(sample_index(&probs, rng)).to_owned());
    }

    let mut assign = vec![0usize; m];
    for _ in 0..iters {
        let mut changed = false;
        for mi in 0..m {
            let mut best = (0usize, f64::INFINITY);
            for (cj, c) in centers.iter().enumerate() {
                let dd: f64 = samples
                    .row(mi)
                    .iter()
                    .zip(c.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dd < best.1 {
                    best = (cj, dd);
                }
            }
            if assign[mi] != best.0 {
                assign[mi] = best.0;
                changed = true;
            }
        }
        for cj in 0..j {
            let mut mean = Array1::zeros(d);
            let mut mass = 0.0;
            for mi in 0..m {
                if assign[mi] == cj {
                    mean.scaled_add(weights[mi], &samples.row(mi));
                    mass += weights[mi];
                }
            }
            if mass > 0.0 {
                centers[cj] = mean / mass;
            }
        }
        if !changed {
            break;
        }
    }

    // Partition -> mixture: weighted cluster moments, global covariance for
    // thin clusters.
    let (_, global_cov) = weighted_moments(samples, weights);
    let mut alphas = vec![0.0; j];
    let mut comps = Vec::with_capacity(j);
    for cj in 0..j {
        let idx: Vec<usize> = (0..m).filter(|&mi| assign[mi] == cj).collect();
        let mass: f64 = idx.iter().map(|&mi| weights[mi]).sum();
        if idx.len() < d + 1 || mass < 1e-12 {
            comps.push(GaussianComponent::new(centers[cj].clone(), global_cov.clone())?);
            alphas[cj] = mass.max(1e-6);
            continue;
        }
        let mut mean = Array1::zeros(d);
        for &mi in &idx {
            mean.scaled_add(weights[mi] / mass, &samples.row(mi));
        }
        let mut cov = Array2::zeros((d, d));
        for &mi in &idx {
            let delta = &samples.row(mi) - &mean;
            for a in 0..d {
                for b in 0..d {
                    cov[[a, b]] += weights[mi] / mass * delta[a] * delta[b];
                }
            }
        }
        match GaussianComponent::new(mean.clone(), cov) {
            Ok(c) => comps.push(c),
            Err(_) => comps.push(GaussianComponent::new(mean, global_cov.clone())?),
        }
        alphas[cj] = mass;
    }
    let total: f64 = alphas.iter().sum();
    for a in alphas.iter_mut() {
        *a /= total;
    }
    MoGPosterior::new(alphas, comps)
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let r: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}
