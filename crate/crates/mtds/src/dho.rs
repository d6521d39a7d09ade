//! The damped-harmonic-oscillator benchmark: task sampling, sequence
//! rendering, dataset construction, and the true-model marginal likelihood.
//!
//! Each task is a sum of two damped sinusoids observed for 80 steps under
//! iid Gaussian noise with std-dev 0.05. Angular frequencies are uniform;
//! decay factors are parameterized by a uniform half-life `nu` and mapped
//! through `rho = exp(-ln 2 / nu)`. Amplitudes are fixed at `[1.0, -0.5]`.
//!
//! Reproducibility: generation is keyed by a single `u64` seed. Task `i`
//! (train tasks first, then test tasks) uses a ChaCha12 stream derived as
//! `(seed, stream = i)`; within a task the four parameters are drawn first
//! (omega1, nu1, omega2, nu2) and then the `T` noise values in time order.
//! Per-task generation is therefore independent and identical no matter how
//! it is parallelized.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::f64::consts::{LN_2, TAU};

use crate::learn::sobol_uniform;
use crate::{Error, Result};

/// Default sequence length.
pub const SEQ_LEN: usize = 80;
/// Default observation noise std-dev.
pub const NOISE_SD: f64 = 0.05;
/// Fixed oscillator amplitudes.
pub const AMPLITUDES: [f64; 2] = [1.0, -0.5];

/// Generating distribution: `omega_1 ~ U` over `[1.5, 6] * 2 pi / 80`,
/// half-life `nu_1 ~ U[4, 80]`, `omega_2 ~ U` over `[5, 8] * 2 pi / 80`,
/// half-life `nu_2 ~ U[8, 60]`.
pub const OMEGA1_RANGE: (f64, f64) = (1.5 * TAU / 80.0, 6.0 * TAU / 80.0);
pub const NU1_RANGE: (f64, f64) = (4.0, 80.0);
pub const OMEGA2_RANGE: (f64, f64) = (5.0 * TAU / 80.0, 8.0 * TAU / 80.0);
pub const NU2_RANGE: (f64, f64) = (8.0, 60.0);

/// Ground-truth parameters of one oscillator task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhoTask {
    /// Angular frequency of the slow component (radians/step).
    pub omega1: f64,
    /// Decay factor of the slow component, in (0, 1].
    pub rho1: f64,
    /// Angular frequency of the fast component.
    pub omega2: f64,
    /// Decay factor of the fast component.
    pub rho2: f64,
}

impl DhoTask {
    /// Half-life in steps of a decay factor: `nu = -ln 2 / ln rho`.
    pub fn half_life(rho: f64) -> f64 {
        -LN_2 / rho.ln()
    }
}

/// `rho = exp(-ln 2 / nu)` for a half-life of `nu` steps.
pub fn half_life_to_decay(nu: f64) -> Result<f64> {
    if nu <= 0.0 {
        return Err(Error::Domain(format!(
            "half_life_to_decay: nu = {nu} must be > 0"
        )));
    }
    Ok((-LN_2 / nu).exp())
}

/// Draw a task from the generating distribution. Draw order is part of the
/// reproducibility contract: omega1, nu1, omega2, nu2.
pub fn sample_task(rng: &mut impl Rng) -> DhoTask {
    let omega1 = rng.random_range(OMEGA1_RANGE.0..OMEGA1_RANGE.1);
    let nu1 = rng.random_range(NU1_RANGE.0..NU1_RANGE.1);
    let omega2 = rng.random_range(OMEGA2_RANGE.0..OMEGA2_RANGE.1);
    let nu2 = rng.random_range(NU2_RANGE.0..NU2_RANGE.1);
    DhoTask {
        omega1,
        rho1: half_life_to_decay(nu1).expect("nu1 > 0"),
        omega2,
        rho2: half_life_to_decay(nu2).expect("nu2 > 0"),
    }
}

/// Noiseless signal `y_t = rho1^t sin(omega1 t) - 0.5 rho2^t sin(omega2 t)`
/// for `t = 1..=steps`.
pub fn render_mean(task: &DhoTask, steps: usize) -> Array1<f64> {
    let mut y = Array1::zeros(steps);
    let mut decay1 = 1.0;
    let mut decay2 = 1.0;
    for t in 1..=steps {
        decay1 *= task.rho1;
        decay2 *= task.rho2;
        y[t - 1] = AMPLITUDES[0] * decay1 * (task.omega1 * t as f64).sin()
            + AMPLITUDES[1] * decay2 * (task.omega2 * t as f64).sin();
    }
    y
}

/// Render one observed sequence; noise values are drawn in time order.
pub fn render_task(
    task: &DhoTask,
    steps: usize,
    noise_sd: f64,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    if steps == 0 {
        return Err(Error::Domain("render_task: need steps >= 1".into()));
    }
    if noise_sd < 0.0 {
        return Err(Error::Domain(format!(
            "render_task: noise_sd = {noise_sd} must be >= 0"
        )));
    }
    let mut y = render_mean(task, steps);
    if noise_sd > 0.0 {
        let noise = Normal::new(0.0, noise_sd).expect("valid noise sd");
        for v in y.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    Ok(y)
}

/// A set of scalar sequences sharing the impulse input `u = [1, 0, 0, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    /// N x T observations.
    pub sequences: Array2<f64>,
    /// Ground-truth tasks when the set is synthetic.
    pub tasks: Option<Vec<DhoTask>>,
    /// T x 1 shared input.
    pub inputs: Array2<f64>,
}

impl SequenceSet {
    pub fn len(&self) -> usize {
        self.sequences.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.nrows() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.ncols()
    }

    /// The shared impulse input.
    pub fn impulse_inputs(steps: usize) -> Array2<f64> {
        let mut u = Array2::zeros((steps, 1));
        u[[0, 0]] = 1.0;
        u
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, tasks: Option<Vec<DhoTask>>) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Dimension("ragged sequence set".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(Self {
            sequences: Array2::from_shape_vec((n, t), flat)
                .map_err(|e| Error::Dimension(e.to_string()))?,
            tasks,
            inputs: Self::impulse_inputs(t),
        })
    }
}

fn task_rng(seed: u64, task_index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(task_index);
    rng
}

fn generate_set(seed: u64, first_index: usize, count: usize, steps: usize) -> SequenceSet {
    let mut sequences = Array2::zeros((count, steps));
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = task_rng(seed, (first_index + i) as u64);
        let task = sample_task(&mut rng);
        let y = render_task(&task, steps, NOISE_SD, &mut rng).expect("valid render args");
        sequences.row_mut(i).assign(&y);
        tasks.push(task);
    }
    SequenceSet {
        sequences,
        tasks: Some(tasks),
        inputs: SequenceSet::impulse_inputs(steps),
    }
}

/// Build independent train/test splits: `T = 80`, `noise_sd = 0.05`,
/// deterministic under `seed`.
pub fn make_dataset(n_train: usize, n_test: usize, seed: u64) -> (SequenceSet, SequenceSet) {
    (
        generate_set(seed, 0, n_train, SEQ_LEN),
        generate_set(seed, n_train, n_test, SEQ_LEN),
    )
}

/// Monte Carlo estimate of `log p(Y)` under the true generating
/// distribution, using `m_samples` Sobol draws of the task prior with a
/// Cranley-Patterson rotation drawn from `rng`. Computed with log-sum-exp.
pub fn true_marginal_loglik(y: ArrayView1<'_, f64>, m_samples: usize, rng: &mut impl Rng) -> f64 {
    let ys = y
        .to_owned()
        .into_shape_with_order((1, y.len()))
        .expect("row reshape");
    true_marginal_loglik_batch(ys.view(), m_samples, rng)[0]
}

/// Batch version amortizing the task renders over all sequences.
pub fn true_marginal_loglik_batch(
    ys: ArrayView2<'_, f64>,
    m_samples: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(m_samples >= 1, "need at least one sample");
    let steps = ys.ncols();
    let shift: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let points = sobol_uniform(m_samples, 4, 1).expect("4-d sobol");

    // One render per particle, shared across all sequences.
    let logliks: Vec<Vec<f64>> = (0..m_samples)
        .into_par_iter()
        .map(|i| {
            let u = |j: usize, lo: f64, hi: f64| {
                let v = (points[[i, j]] + shift[j]).fract();
                lo + v * (hi - lo)
            };
            let task = DhoTask {
                omega1: u(0, OMEGA1_RANGE.0, OMEGA1_RANGE.1),
                rho1: half_life_to_decay(u(1, NU1_RANGE.0, NU1_RANGE.1)).expect("nu > 0"),
                omega2: u(2, OMEGA2_RANGE.0, OMEGA2_RANGE.1),
                rho2: half_life_to_decay(u(3, NU2_RANGE.0, NU2_RANGE.1)).expect("nu > 0"),
            };
            let mean = render_mean(&task, steps);
            let norm = steps as f64 * (-0.5 * (TAU * NOISE_SD * NOISE_SD).ln());
            ys.rows()
                .into_iter()
                .map(|row| {
                    let mut sq = 0.0;
                    for (a, b) in row.iter().zip(mean.iter()) {
                        let r = a - b;
                        sq += r * r;
                    }
                    norm - sq / (2.0 * NOISE_SD * NOISE_SD)
                })
                .collect()
        })
        .collect();

    (0..ys.nrows())
        .map(|row| {
            let col: Vec<f64> = logliks.iter().map(|l| l[row]).collect();
            log_mean_exp(&col)
        })
        .collect()
}

pub(crate) fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_life_one_step_halves() {
        assert!((half_life_to_decay(1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn half_life_endpoints_match_4dp() {
        // rho1 over nu in [4, 80]; rho2 over nu in [8, 60]
        assert!((half_life_to_decay(4.0).unwrap() - 0.8409).abs() < 5e-5);
        assert!((half_life_to_decay(80.0).unwrap() - 0.9914).abs() < 5e-5);
        assert!((half_life_to_decay(8.0).unwrap() - 0.9170).abs() < 5e-5);
        assert!((half_life_to_decay(60.0).unwrap() - 0.9885).abs() < 5e-5);
    }

    #[test]
    fn half_life_rejects_nonpositive() {
        assert!(half_life_to_decay(0.0).is_err());
        assert!(half_life_to_decay(-3.0).is_err());
    }

    #[test]
    fn sample_task_is_deterministic_under_seed() {
        let a = sample_task(&mut task_rng(9, 0));
        let b = sample_task(&mut task_rng(9, 0));
        assert_eq!(a, b);
        let c = sample_task(&mut task_rng(9, 1));
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_decays_stay_in_footnote_support() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..20_000 {
            let t = sample_task(&mut rng);
            assert!(t.rho1 > 0.84089 && t.rho1 < 0.99138);
            assert!(t.rho2 > 0.91700 && t.rho2 < 0.98852);
        }
    }

    #[test]
    fn sampled_omega1_mean_matches_uniform() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_task(&mut rng).omega1).sum::<f64>() / n as f64;
        let expect = 0.5 * (OMEGA1_RANGE.0 + OMEGA1_RANGE.1);
        let sd = (OMEGA1_RANGE.1 - OMEGA1_RANGE.0) / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * sd);
    }

    #[test]
    fn equal_oscillators_cancel_to_half_amplitude() {
        let task = DhoTask {
            omega1: 0.5,
            rho1: 1.0,
            omega2: 0.5,
            rho2: 1.0,
        };
        let y = render_mean(&task, 10);
        for t in 1..=10 {
            assert!((y[t - 1] - 0.5 * (0.5 * t as f64).sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn render_matches_frozen_closed_form_value() {
        // omega1 = 3*2pi/80, nu1 = 40, omega2 = 6*2pi/80, nu2 = 20, t = 1 and 7
        let task = DhoTask {
            omega1: TAU / 80.0 * 3.0,
            rho1: half_life_to_decay(40.0).unwrap(),
            omega2: TAU / 80.0 * 6.0,
            rho2: half_life_to_decay(20.0).unwrap(),
        };
        let y = render_mean(&task, 8);
        assert!((y[0] - 0.010171953889887925).abs() < 1e-15);
        assert!((y[6] - 0.9444049902677079).abs() < 1e-14);
    }

    #[test]
    fn sine_zeros_give_zero_signal() {
        let task = DhoTask {
            omega1: std::f64::consts::PI,
            rho1: 0.95,
            omega2: std::f64::consts::PI,
            rho2: 0.99,
        };
        let y = render_mean(&task, 6);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dataset_is_reproducible_and_split() {
        let (tr1, te1) = make_dataset(4, 3, 42);
        let (tr2, te2) = make_dataset(4, 3, 42);
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(tr1.len(), 4);
        assert_eq!(te1.len(), 3);
        assert_eq!(tr1.seq_len(), SEQ_LEN);
        let (tr3, _) = make_dataset(4, 3, 43);
        assert_ne!(tr1, tr3);
        // test tasks are not the train tasks
        let t_train = tr1.tasks.as_ref().unwrap();
        let t_test = te1.tasks.as_ref().unwrap();
        assert!(t_train.iter().all(|a| t_test.iter().all(|b| a != b)));
    }

    #[test]
    fn single_sample_marginal_is_plain_loglik() {
        let (_, test) = make_dataset(0, 1, 7);
        let y = test.sequences.row(0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let shift: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let mut rng2 = ChaCha12Rng::seed_from_u64(1);
        let est = true_marginal_loglik(y, 1, &mut rng2);
        // recompute the single shifted Sobol task by hand
        let points = sobol_uniform(1, 4, 1).unwrap();
        let u = |j: usize, lo: f64, hi: f64| lo + (points[[0, j]] + shift[j]).fract() * (hi - lo);
        let task = DhoTask {
            omega1: u(0, OMEGA1_RANGE.0, OMEGA1_RANGE.1),
            rho1: half_life_to_decay(u(1, NU1_RANGE.0, NU1_RANGE.1)).unwrap(),
            omega2: u(2, OMEGA2_RANGE.0, OMEGA2_RANGE.1),
            rho2: half_life_to_decay(u(3, NU2_RANGE.0, NU2_RANGE.1)).unwrap(),
        };
        let mean = render_mean(&task, y.len());
        let direct = crate::model::gaussian_loglik(
            y.to_owned()
                .into_shape_with_order((y.len(), 1))
                .unwrap()
                .view(),
            mean.into_shape_with_order((y.len(), 1)).unwrap().view(),
            NOISE_SD,
        )
        .unwrap();
        assert!((est - direct).abs() < 1e-10);
    }
}
