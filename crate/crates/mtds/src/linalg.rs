//! Small dense linear algebra used by the parameterizations and the
//! mixture-of-Gaussians machinery: LU with partial pivoting and Cholesky.
//!
//! Matrices here are tiny (state dimension and latent dimension, n <= 16),
//! so plain O(n^3) loops are the right tool.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::{Error, Result};

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct LuFactor {
    lu: Array2<f64>,
    perm: Vec<usize>,
    /// Largest |pivot| seen, for relative singularity checks.
    max_pivot: f64,
    /// Smallest |pivot| seen.
    min_pivot: f64,
}

/// Factor a square matrix. Fails only on non-square input; near-singular
/// matrices are reported through [`LuFactor::is_singular`] and produce
/// non-finite solutions if used anyway.
pub fn lu_factor(a: ArrayView2<'_, f64>) -> Result<LuFactor> {
    let n = square_dim(&a)?;
    let mut lu = a.to_owned();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut max_pivot = 0.0_f64;
    let mut min_pivot = f64::INFINITY;

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu[[col, col]].abs();
        for row in col + 1..n {
            let v = lu[[row, col]].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_row != col {
            perm.swap(col, pivot_row);
            for j in 0..n {
                let tmp = lu[[col, j]];
                lu[[col, j]] = lu[[pivot_row, j]];
                lu[[pivot_row, j]] = tmp;
            }
        }
        max_pivot = max_pivot.max(pivot_val);
        min_pivot = min_pivot.min(pivot_val);
        let pivot = lu[[col, col]];
        if pivot == 0.0 {
            continue; // exactly singular; recorded via min_pivot = 0
        }
        for row in col + 1..n {
            let factor = lu[[row, col]] / pivot;
            lu[[row, col]] = factor;
            for j in col + 1..n {
                lu[[row, j]] -= factor * lu[[col, j]];
            }
        }
    }

    Ok(LuFactor {
        lu,
        perm,
        max_pivot,
        min_pivot,
    })
}

impl LuFactor {
    pub fn dim(&self) -> usize {
        self.lu.nrows()
    }

    /// Relative singularity test: smallest pivot below `tol` times the largest.
    pub fn is_singular(&self, tol: f64) -> bool {
        self.min_pivot <= tol * self.max_pivot.max(f64::MIN_POSITIVE)
    }

    pub fn solve_vec(&self, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "lu solve: rhs length {} != {}",
                b.len(),
                n
            )));
        }
        let mut x = Array1::zeros(n);
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        // forward: L y = P b (unit diagonal)
        for i in 0..n {
            for j in 0..i {
                let lij = self.lu[[i, j]];
                x[i] -= lij * x[j];
            }
        }
        // backward: U x = y
        for i in (0..n).rev() {
            for j in i + 1..n {
                let uij = self.lu[[i, j]];
                x[i] -= uij * x[j];
            }
            x[i] /= self.lu[[i, i]];
        }
        Ok(x)
    }

    /// Solve `A X = B` column by column.
    pub fn solve_mat(&self, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = self.dim();
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "lu solve: rhs has {} rows, expected {}",
                b.nrows(),
                n
            )));
        }
        let mut x = Array2::zeros((n, b.ncols()));
        for j in 0..b.ncols() {
            let col = self.solve_vec(b.column(j))?;
            x.column_mut(j).assign(&col);
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Array2<f64>> {
        self.solve_mat(Array2::eye(self.dim()).view())
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = square_dim(&a)?;
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Numerical(format!(
                        "cholesky: matrix not positive definite (d[{i}] = {sum:e})"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `L L^T x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let n = square_dim(&l)?;
    if b.len() != n {
        return Err(Error::Dimension(format!(
            "cholesky solve: rhs length {} != {}",
            b.len(),
            n
        )));
    }
    let mut x = b.to_owned();
    for i in 0..n {
        for j in 0..i {
            let lij = l[[i, j]];
            x[i] -= lij * x[j];
        }
        x[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for j in i + 1..n {
            let lji = l[[j, i]];
            x[i] -= lji * x[j];
        }
        x[i] /= l[[i, i]];
    }
    Ok(x)
}

/// log det(A) = 2 sum log L_ii for the lower Cholesky factor of A.
pub fn cholesky_logdet(l: ArrayView2<'_, f64>) -> f64 {
    (0..l.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>() * 2.0
}

pub fn frobenius_norm(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn square_dim(a: &ArrayView2<'_, f64>) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "expected square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.nrows())
}
