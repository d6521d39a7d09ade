//! Mapping raw parameter vectors to realized system matrices and back.
//!
//! LDS raw layout (versioned; checkpoints depend on it):
//! `[upsilon(n), gamma(n(n-1)/2), B1(n*m), B2(n*m), bias(n), C(p*n), d(p)]`
//! with matrices stored row-major. The transition comes from the stable
//! tanh/Cayley parameterization, the input matrix from the sigmoid*tanh
//! bound; `bias`, `C`, `d` are copied unconstrained.
//!
//! RNN raw layout: `[A(n*n), B(n*m), bias(n), C(p*n), d(p)]`, all
//! unconstrained; stability of the transition is not required under the
//! tanh recursion.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::linalg::lu_factor;
use crate::paramspace::{
    bounded_matrix, stable_transition, BoundedMatrix, BoundedMatrixRaw, SkewCoeffs,
    StableTransition, StableTransitionRaw,
};
use crate::{Error, Result};

/// A realized linear system. By construction `sigma_max(A) < 1` and `s > 0`;
/// the direct feed-through `D` is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsRealization {
    /// n x n transition.
    pub a: Array2<f64>,
    /// n x m input matrix.
    pub b: Array2<f64>,
    /// n dynamics bias.
    pub bias: Array1<f64>,
    /// p x n emission matrix.
    pub c: Array2<f64>,
    /// p emission bias.
    pub d: Array1<f64>,
    /// Emission std-dev.
    pub s: f64,
}

/// A realized tanh-RNN system; same fields, unconstrained transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnRealization {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub bias: Array1<f64>,
    pub c: Array2<f64>,
    pub d: Array1<f64>,
    pub s: f64,
}

/// Gradient with respect to the realized matrices (shared by both bases).
#[derive(Debug, Clone)]
pub struct SystemGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub bias: Array1<f64>,
    pub c: Array2<f64>,
    pub d: Array1<f64>,
}

impl SystemGrad {
    pub fn zeros(n: usize, m: usize, p: usize) -> Self {
        Self {
            a: Array2::zeros((n, n)),
            b: Array2::zeros((n, m)),
            bias: Array1::zeros(n),
            c: Array2::zeros((p, n)),
            d: Array1::zeros(p),
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.a += &other.a;
        self.b += &other.b;
        self.bias += &other.bias;
        self.c += &other.c;
        self.d += &other.d;
    }
}

/// Forward caches needed by [`realize_lds_backward`].
#[derive(Debug, Clone)]
pub struct LdsCache {
    stable: StableTransition,
    bounded: BoundedMatrix,
    n: usize,
    m: usize,
    p: usize,
}

pub fn lds_raw_len(n: usize, m: usize, p: usize) -> usize {
    n + SkewCoeffs::coeff_count(n) + 2 * n * m + n + p * n + p
}

pub fn rnn_raw_len(n: usize, m: usize, p: usize) -> usize {
    n * n + n * m + n + p * n + p
}

/// Realize an LDS from a raw vector; `s = exp(log_s)`.
pub fn realize_lds(
    raw: ArrayView1<'_, f64>,
    n: usize,
    m: usize,
    p: usize,
    log_s: f64,
) -> Result<(LdsRealization, LdsCache)> {
    if raw.len() != lds_raw_len(n, m, p) {
        return Err(Error::Dimension(format!(
            "lds raw vector has {} entries, layout needs {}",
            raw.len(),
            lds_raw_len(n, m, p)
        )));
    }
    let n_skew = SkewCoeffs::coeff_count(n);
    let mut at = 0usize;
    let mut take = |len: usize| {
        let part = raw.slice(s![at..at + len]).to_owned();
        at += len;
        part
    };

    let upsilon = take(n);
    let gamma = take(n_skew);
    let b1 = take(n * m).into_shape_with_order((n, m)).unwrap();
    let b2 = take(n * m).into_shape_with_order((n, m)).unwrap();
    let bias = take(n);
    let c = take(p * n).into_shape_with_order((p, n)).unwrap();
    let d = take(p);

    let stable = stable_transition(&StableTransitionRaw::new(upsilon, SkewCoeffs::new(n, gamma)?)?)?;
    let bounded = bounded_matrix(&BoundedMatrixRaw::new(b1, b2)?);

    let real = LdsRealization {
        a: stable.a.clone(),
        b: bounded.b.clone(),
        bias,
        c,
        d,
        s: log_s.exp(),
    };
    Ok((real, LdsCache {
        stable,
        bounded,
        n,
        m,
        p,
    }))
}

/// Adjoint of [`realize_lds`]: gradient on the realized matrices back to the
/// raw vector (the `log_s -> s` link is handled on the likelihood side).
pub fn realize_lds_backward(cache: &LdsCache, grad: &SystemGrad) -> Array1<f64> {
    let (n, m, p) = (cache.n, cache.m, cache.p);
    let trans = cache.stable.adjoint(grad.a.view());
    let bound = cache.bounded.adjoint(grad.b.view());

    let mut raw_bar = Vec::with_capacity(lds_raw_len(n, m, p));
    raw_bar.extend(trans.upsilon.iter());
    raw_bar.extend(trans.gamma.iter());
    raw_bar.extend(bound.b1.iter());
    raw_bar.extend(bound.b2.iter());
    raw_bar.extend(grad.bias.iter());
    raw_bar.extend(grad.c.iter());
    raw_bar.extend(grad.d.iter());
    Array1::from(raw_bar)
}

/// Realize an RNN from a raw vector; everything is a straight reshape.
pub fn realize_rnn(
    raw: ArrayView1<'_, f64>,
    n: usize,
    m: usize,
    p: usize,
    log_s: f64,
) -> Result<RnnRealization> {
    if raw.len() != rnn_raw_len(n, m, p) {
        return Err(Error::Dimension(format!(
            "rnn raw vector has {} entries, layout needs {}",
            raw.len(),
            rnn_raw_len(n, m, p)
        )));
    }
    let mut at = 0usize;
    let mut take = |len: usize| {
        let part = raw.slice(s![at..at + len]).to_owned();
        at += len;
        part
    };
    Ok(RnnRealization {
        a: take(n * n).into_shape_with_order((n, n)).unwrap(),
        b: take(n * m).into_shape_with_order((n, m)).unwrap(),
        bias: take(n),
        c: take(p * n).into_shape_with_order((p, n)).unwrap(),
        d: take(p),
        s: log_s.exp(),
    })
}

pub fn realize_rnn_backward(grad: &SystemGrad) -> Array1<f64> {
    let mut raw_bar =
        Vec::with_capacity(rnn_raw_len(grad.a.nrows(), grad.b.ncols(), grad.c.nrows()));
    raw_bar.extend(grad.a.iter());
    raw_bar.extend(grad.b.iter());
    raw_bar.extend(grad.bias.iter());
    raw_bar.extend(grad.c.iter());
    raw_bar.extend(grad.d.iter());
    Array1::from(raw_bar)
}

/// Change of state basis `x -> G^-1 x`: the output distribution is
/// unchanged. Fails if `G` is numerically singular.
pub fn similarity_transform(
    params: &LdsRealization,
    g: ArrayView2<'_, f64>,
) -> Result<LdsRealization> {
    let n = params.a.nrows();
    if g.dim() != (n, n) {
        return Err(Error::Dimension(format!(
            "similarity transform: G is {:?}, state dimension is {n}",
            g.dim()
        )));
    }
    let f = lu_factor(g)?;
    if f.is_singular(1e-13) {
        return Err(Error::Numerical("similarity transform: G is singular".into()));
    }
    let g_inv = f.inverse()?;
    Ok(LdsRealization {
        a: g_inv.dot(&params.a).dot(&g),
        b: g_inv.dot(&params.b),
        bias: g_inv.dot(&params.bias),
        c: params.c.dot(&g),
        d: params.d.clone(),
        s: params.s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dho_raw_length_is_27() {
        assert_eq!(lds_raw_len(4, 1, 1), 27);
    }

    #[test]
    fn zero_raw_realizes_zero_system() {
        let raw = Array1::zeros(lds_raw_len(3, 2, 1));
        let (real, _) = realize_lds(raw.view(), 3, 2, 1, 0.0).unwrap();
        assert!(real.a.iter().all(|v| *v == 0.0));
        assert!(real.b.iter().all(|v| *v == 0.0));
        assert!(real.bias.iter().all(|v| *v == 0.0));
        assert!(real.c.iter().all(|v| *v == 0.0));
        assert!(real.d.iter().all(|v| *v == 0.0));
        assert_eq!(real.s, 1.0);
    }

    #[test]
    fn layout_mismatch_is_error() {
        let raw = Array1::zeros(5);
        assert!(realize_lds(raw.view(), 3, 2, 1, 0.0).is_err());
        assert!(realize_rnn(raw.view(), 3, 2, 1, 0.0).is_err());
    }

    #[test]
    fn identity_transform_is_noop() {
        let params = LdsRealization {
            a: array![[0.5, 0.1], [0.0, 0.4]],
            b: array![[1.0], [0.0]],
            bias: array![0.1, -0.2],
            c: array![[1.0, 2.0]],
            d: array![0.3],
            s: 0.1,
        };
        let out = similarity_transform(&params, Array2::eye(2).view()).unwrap();
        assert!((&out.a - &params.a).iter().all(|v| v.abs() < 1e-14));
        assert!((&out.c - &params.c).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn scaling_transform_rescales_b_and_c() {
        let params = LdsRealization {
            a: array![[0.5, 0.1], [0.2, 0.4]],
            b: array![[1.0], [2.0]],
            bias: array![0.0, 0.0],
            c: array![[1.0, 1.0]],
            d: array![0.0],
            s: 0.1,
        };
        let g = Array2::eye(2) * 2.0;
        let out = similarity_transform(&params, g.view()).unwrap();
        assert!((&out.a - &params.a).iter().all(|v| v.abs() < 1e-14));
        assert!((out.b[[0, 0]] - 0.5).abs() < 1e-14);
        assert!((out.c[[0, 0]] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_g_is_rejected() {
        let params = LdsRealization {
            a: Array2::eye(2) * 0.5,
            b: array![[1.0], [0.0]],
            bias: array![0.0, 0.0],
            c: array![[1.0, 0.0]],
            d: array![0.0],
            s: 0.1,
        };
        let g = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(similarity_transform(&params, g.view()).is_err());
    }
}
