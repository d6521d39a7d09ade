//! Posterior dump format: line-delimited JSON, one record per filtered
//! posterior with the mixture parameters (Cholesky factors of the
//! covariances), the ESS trace, and retry count.

use anyhow::Result;
use mtds::infer::{FilteredPosterior, MoGPosterior};
use mtds::linalg::cholesky;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub t: usize,
    pub alpha: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub cov_cholesky: Vec<Vec<Vec<f64>>>,
    pub ess_trace: Vec<f64>,
    pub retries: usize,
    pub converged: bool,
}

impl PosteriorRecord {
    pub fn from_filtered(fp: &FilteredPosterior) -> Result<Self> {
        let q = &fp.result.posterior;
        let mut mu = Vec::new();
        let mut chol = Vec::new();
        for c in q.components() {
            mu.push(c.mean.to_vec());
            let l = cholesky(c.cov.view()).map_err(|e| anyhow::anyhow!(e.to_string()))?;
            chol.push(l.rows().into_iter().map(|r| r.to_vec()).collect());
        }
        Ok(Self {
            t: fp.t,
            alpha: q.weights().to_vec(),
            mu,
            cov_cholesky: chol,
            ess_trace: fp.result.ess_trace.clone(),
            retries: fp.result.retries,
            converged: fp.result.converged,
        })
    }

    pub fn to_mixture(&self) -> Result<MoGPosterior> {
        use mtds::infer::GaussianComponent;
        use ndarray::{Array1, Array2};
        let mut comps = Vec::new();
        for (mean, l) in self.mu.iter().zip(&self.cov_cholesky) {
            let d = mean.len();
            let lmat = Array2::from_shape_fn((d, d), |(i, j)| l[i][j]);
            let cov = lmat.dot(&lmat.t());
            comps.push(
                GaussianComponent::new(Array1::from(mean.clone()), cov)
                    .map_err(|e| anyhow::anyhow!(e.to_string()))?,
            );
        }
        MoGPosterior::new(self.alpha.clone(), comps).map_err(|e| anyhow::anyhow!(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtds::infer::GaussianComponent;
    use ndarray::{array, Array1};

    #[test]
    fn record_roundtrips_mixture_moments() {
        let a = GaussianComponent::new(array![0.5, -1.0], array![[0.3, 0.1], [0.1, 0.4]]).unwrap();
        let b = GaussianComponent::new(array![2.0, 1.0], array![[1.0, 0.0], [0.0, 0.2]]).unwrap();
        let q = MoGPosterior::new(vec![0.4, 0.6], vec![a, b]).unwrap();
        let fp = FilteredPosterior {
            t: 10,
            result: mtds::infer::AdaisResult {
                posterior: q.clone(),
                samples: ndarray::Array2::zeros((1, 2)),
                weights: vec![1.0],
                ess_trace: vec![50.0, 200.0],
                retries: 0,
                converged: true,
                final_ess: 900.0,
            },
        };
        let record = PosteriorRecord::from_filtered(&fp).unwrap();
        let text = serde_json::to_string(&record).unwrap();
        let back: PosteriorRecord = serde_json::from_str(&text).unwrap();
        let q2 = back.to_mixture().unwrap();
        let (m1, c1) = q.moments();
        let (m2, c2) = q2.moments();
        assert!(m1
            .iter()
            .zip(m2.iter())
            .all(|(x, y): (&f64, &f64)| (x - y).abs() < 1e-12));
        assert!(c1
            .iter()
            .zip(c2.iter())
            .all(|(x, y): (&f64, &f64)| (x - y).abs() < 1e-12));
        let _unused: Array1<f64> = Array1::zeros(1);
    }
}
