//! Constrained matrix parameterizations and their exact reverse-mode adjoints.
//!
//! Unconstrained raw parameters are mapped to valid system matrices:
//!
//! - a skew-symmetric matrix `S = G - G^T` built from strictly-upper
//!   coefficients, Cayley-transformed into an orthogonal `Q`;
//! - a stable transition `A = diag(tanh(upsilon)) * Q` with spectral norm
//!   `max_i |tanh(upsilon_i)| < 1` (signed diagonal entries absorb the
//!   negative-eigenvalue case);
//! - a bounded input matrix `B = sigmoid(B1) .* tanh(B2)` with every entry
//!   strictly inside (-1, 1).
//!
//! Each forward pass returns a cache struct whose `adjoint` method implements
//! the exact vector-Jacobian product; the Cayley adjoint uses
//! `d(M^-1) = -M^-1 dM M^-1`.
//!
//! Raw coefficient storage is row-major over the strictly-upper triangle;
//! this order is part of the checkpoint format.

use ndarray::{Array1, Array2, ArrayView2};

use crate::linalg::{frobenius_norm, lu_factor};
use crate::{Error, Result};

/// Post-hoc orthogonality gate on the Cayley solve.
const CAYLEY_RESIDUAL_TOL: f64 = 1e-8;

/// Coefficients of a skew-symmetric matrix: `n(n-1)/2` reals filling the
/// strictly-upper triangle of `G` row-major; the realized matrix is `G - G^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewCoeffs {
    n: usize,
    gamma: Array1<f64>,
}

impl SkewCoeffs {
    pub fn new(n: usize, gamma: Array1<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("skew coefficients need n >= 1".into()));
        }
        let want = Self::coeff_count(n);
        if gamma.len() != want {
            return Err(Error::Dimension(format!(
                "skew coefficients: got {} entries, expected n(n-1)/2 = {} for n = {}",
                gamma.len(),
                want,
                n
            )));
        }
        Ok(Self { n, gamma })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            gamma: Array1::zeros(Self::coeff_count(n)),
        }
    }

    pub fn coeff_count(n: usize) -> usize {
        n * (n - 1) / 2
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> &Array1<f64> {
        &self.gamma
    }
}

/// Realize `S = G - G^T`; exactly antisymmetric by construction.
pub fn skew_symmetric(coeffs: &SkewCoeffs) -> Array2<f64> {
    let n = coeffs.n;
    let mut s = Array2::zeros((n, n));
    let mut idx = 0;
    for i in 0..n {
        for j in i + 1..n {
            let g = coeffs.gamma[idx];
            s[[i, j]] = g;
            s[[j, i]] = -g;
            idx += 1;
        }
    }
    s
}

/// Adjoint of [`skew_symmetric`]: maps an upstream gradient on `S` back to
/// the strictly-upper coefficients, `gamma_bar[ij] = S_bar[ij] - S_bar[ji]`.
pub fn skew_symmetric_adjoint(s_bar: ArrayView2<'_, f64>) -> Array1<f64> {
    let n = s_bar.nrows();
    let mut gamma_bar = Array1::zeros(SkewCoeffs::coeff_count(n));
    let mut idx = 0;
    for i in 0..n {
        for j in i + 1..n {
            gamma_bar[idx] = s_bar[[i, j]] - s_bar[[j, i]];
            idx += 1;
        }
    }
    gamma_bar
}

/// Cayley transform `Q = (I - S)(I + S)^-1` of a skew-symmetric matrix,
/// with the resolvent `(I + S)^-1` retained for the adjoint.
#[derive(Debug, Clone)]
pub struct Cayley {
    pub q: Array2<f64>,
    resolvent: Array2<f64>,
}

/// For exactly antisymmetric `S`, `I + S` is always invertible and `Q` is
/// orthogonal with no eigenvalue -1. The solve is LU with partial pivoting;
/// the orthogonality residual is checked post-hoc and a numerical error is
/// raised if it exceeds tolerance.
pub fn cayley(s: ArrayView2<'_, f64>) -> Result<Cayley> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::Dimension(format!(
            "cayley: expected square matrix, got {}x{}",
            n,
            s.ncols()
        )));
    }
    let mut i_plus = s.to_owned();
    let mut i_minus = -s.to_owned();
    for i in 0..n {
        i_plus[[i, i]] += 1.0;
        i_minus[[i, i]] += 1.0;
    }
    let resolvent = lu_factor(i_plus.view())?.inverse()?;
    let q = i_minus.dot(&resolvent);

    let mut gram = q.t().dot(&q);
    for i in 0..n {
        gram[[i, i]] -= 1.0;
    }
    let residual = frobenius_norm(gram.view());
    if !residual.is_finite() || residual >= CAYLEY_RESIDUAL_TOL {
        return Err(Error::Numerical(format!(
            "cayley: orthogonality residual {residual:e} exceeds {CAYLEY_RESIDUAL_TOL:e}"
        )));
    }
    Ok(Cayley { q, resolvent })
}

impl Cayley {
    /// Vector-Jacobian product: given `Q_bar`, return `S_bar`.
    ///
    /// With `P = (I + S)^-1`, the differential is `dQ = -(I + Q) dS P`,
    /// hence `S_bar = -(I + Q)^T Q_bar P^T`.
    pub fn adjoint(&self, q_bar: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = self.q.nrows();
        let mut i_plus_q = self.q.clone();
        for i in 0..n {
            i_plus_q[[i, i]] += 1.0;
        }
        -i_plus_q.t().dot(&q_bar).dot(&self.resolvent.t())
    }
}

/// Raw parameters of a stable transition matrix: pre-tanh singular
/// magnitudes plus skew coefficients for the orthogonal factor.
#[derive(Debug, Clone, PartialEq)]
pub struct StableTransitionRaw {
    pub upsilon: Array1<f64>,
    pub skew: SkewCoeffs,
}

impl StableTransitionRaw {
    pub fn new(upsilon: Array1<f64>, skew: SkewCoeffs) -> Result<Self> {
        if upsilon.len() != skew.n() {
            return Err(Error::Dimension(format!(
                "stable transition: upsilon has {} entries but skew dimension is {}",
                upsilon.len(),
                skew.n()
            )));
        }
        Ok(Self { upsilon, skew })
    }

    pub fn n(&self) -> usize {
        self.skew.n()
    }
}

/// Gradient with respect to [`StableTransitionRaw`].
#[derive(Debug, Clone)]
pub struct StableTransitionGrad {
    pub upsilon: Array1<f64>,
    pub gamma: Array1<f64>,
}

/// Realized stable transition `A = diag(tanh(upsilon)) Q` with forward cache.
#[derive(Debug, Clone)]
pub struct StableTransition {
    pub a: Array2<f64>,
    sigma: Array1<f64>,
    cayley: Cayley,
}

pub fn stable_transition(raw: &StableTransitionRaw) -> Result<StableTransition> {
    let sigma = raw.upsilon.mapv(f64::tanh);
    let cayley = cayley(skew_symmetric(&raw.skew).view())?;
    let mut a = cayley.q.clone();
    for (i, row) in a.rows_mut().into_iter().enumerate() {
        let si = sigma[i];
        for v in row {
            *v *= si;
        }
    }
    Ok(StableTransition { a, sigma, cayley })
}

impl StableTransition {
    /// Singular values of `A` are exactly `|tanh(upsilon_i)|`.
    pub fn sigma(&self) -> &Array1<f64> {
        &self.sigma
    }

    pub fn q(&self) -> &Array2<f64> {
        &self.cayley.q
    }

    pub fn adjoint(&self, a_bar: ArrayView2<'_, f64>) -> StableTransitionGrad {
        let n = self.sigma.len();
        // sigma_bar_i = sum_j A_bar_ij Q_ij; Q_bar = diag(sigma) A_bar
        let mut upsilon = Array1::zeros(n);
        let mut q_bar = a_bar.to_owned();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_bar[[i, j]] * self.cayley.q[[i, j]];
                q_bar[[i, j]] *= self.sigma[i];
            }
            upsilon[i] = acc * (1.0 - self.sigma[i] * self.sigma[i]);
        }
        let gamma = skew_symmetric_adjoint(self.cayley.adjoint(q_bar.view()).view());
        StableTransitionGrad { upsilon, gamma }
    }
}

/// Raw gate/value pre-activations of a bounded matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedMatrixRaw {
    pub b1: Array2<f64>,
    pub b2: Array2<f64>,
}

impl BoundedMatrixRaw {
    pub fn new(b1: Array2<f64>, b2: Array2<f64>) -> Result<Self> {
        if b1.dim() != b2.dim() {
            return Err(Error::Dimension(format!(
                "bounded matrix: gate is {:?} but value is {:?}",
                b1.dim(),
                b2.dim()
            )));
        }
        Ok(Self { b1, b2 })
    }
}

#[derive(Debug, Clone)]
pub struct BoundedMatrixGrad {
    pub b1: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Realized `B = sigmoid(B1) .* tanh(B2)`; entries strictly inside (-1, 1).
#[derive(Debug, Clone)]
pub struct BoundedMatrix {
    pub b: Array2<f64>,
    gate: Array2<f64>,
    value: Array2<f64>,
}

pub fn bounded_matrix(raw: &BoundedMatrixRaw) -> BoundedMatrix {
    let gate = raw.b1.mapv(sigmoid);
    let value = raw.b2.mapv(f64::tanh);
    let b = &gate * &value;
    BoundedMatrix { b, gate, value }
}

impl BoundedMatrix {
    pub fn adjoint(&self, b_bar: ArrayView2<'_, f64>) -> BoundedMatrixGrad {
        let b1 = &b_bar.to_owned() * &self.value * &self.gate.mapv(|g| g * (1.0 - g));
        let b2 = &b_bar.to_owned() * &self.gate * &self.value.mapv(|v| 1.0 - v * v);
        BoundedMatrixGrad { b1, b2 }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
