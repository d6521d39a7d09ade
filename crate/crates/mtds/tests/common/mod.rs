//! Shared oracles for the integration tests: central finite differences and
//! random instances. Everything here is independent of the library's
//! reverse-mode code paths.

#![allow(dead_code)]

use mtds::model::{BaseModel, HyperNetParams, ModelDims};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function over a flat vector.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Symmetric relative error with an absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

pub fn seeded(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn random_vec(len: usize, scale: f64, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-scale..scale))
}

pub fn random_mat(r: usize, c: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

/// A small random model instance for gradient checks.
pub struct SmallInstance {
    pub dims: ModelDims,
    pub base: BaseModel,
    pub phi: HyperNetParams,
    pub z: Array1<f64>,
    pub u: Array2<f64>,
    pub y: Array2<f64>,
}

pub fn small_instance(base: BaseModel, seed: u64) -> SmallInstance {
    let mut rng = seeded(seed);
    let dims = ModelDims {
        n: 3,
        m: 1,
        p: 1,
        k: 2,
        h: 6,
    };
    let mut phi = HyperNetParams::init(dims, base, &mut rng);
    // perturb every block so no gradient path starts at an exact zero
    phi.hidden_bias = random_vec(dims.h, 0.3, &mut rng);
    phi.out_bias = &phi.out_bias + &random_vec(dims.raw_len(base), 0.4, &mut rng);
    phi.out_weights = &phi.out_weights + &random_mat(dims.h, dims.raw_len(base), 0.05, &mut rng);
    phi.log_s = rng.random_range(-1.5..-0.5);
    let steps = 10;
    let mut u = Array2::zeros((steps, dims.m));
    u[[0, 0]] = 1.0;
    let y = random_mat(steps, dims.p, 0.8, &mut rng);
    let z = random_vec(dims.k, 1.0, &mut rng);
    SmallInstance {
        dims,
        base,
        phi,
        z,
        u,
        y,
    }
}
