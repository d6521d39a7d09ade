//! Low-discrepancy Sobol points and the inverse standard-normal CDF.
//!
//! The generator walks the sequence in Gray-code order with 32-bit
//! direction numbers (Joe-Kuo primitive polynomials, first 16 dimensions).
//! The all-zeros point at index 0 is never emitted: it would map to -inf
//! under the inverse normal CDF, so streams start at index 1.

use ndarray::Array2;

use crate::{Error, Result};

/// Highest supported dimension.
pub const SOBOL_MAX_DIM: usize = 16;

/// (s, a, m) rows for dimensions 2..=16 of the Joe-Kuo table; dimension 1
/// is the van der Corput sequence.
const JOE_KUO: [(u32, u32, &[u32]); 15] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
];

const BITS: usize = 32;

fn direction_numbers(dim: usize) -> Vec<[u32; BITS]> {
    let mut dirs = Vec::with_capacity(dim);
    // dimension 1: v_j = 1 << (31 - j)
    let mut v0 = [0u32; BITS];
    for (j, v) in v0.iter_mut().enumerate() {
        *v = 1 << (31 - j);
    }
    dirs.push(v0);
    for &(s, a, m) in JOE_KUO.iter().take(dim.saturating_sub(1)) {
        let s = s as usize;
        let mut v = [0u32; BITS];
        for j in 0..s.min(BITS) {
            v[j] = m[j] << (31 - j);
        }
        for j in s..BITS {
            let mut value = v[j - s] ^ (v[j - s] >> s);
            for t in 1..s {
                if (a >> (s - 1 - t)) & 1 == 1 {
                    value ^= v[j - t];
                }
            }
            v[j] = value;
        }
        dirs.push(v);
    }
    dirs
}

/// Stateful Sobol stream over `(0, 1)^dim`, starting at sequence index 1.
#[derive(Debug, Clone)]
pub struct SobolSeq {
    dim: usize,
    index: u64,
    state: Vec<u32>,
    dirs: Vec<[u32; BITS]>,
}

impl SobolSeq {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > SOBOL_MAX_DIM {
            return Err(Error::Domain(format!(
                "sobol: dimension {dim} outside 1..={SOBOL_MAX_DIM}"
            )));
        }
        Ok(Self {
            dim,
            index: 0,
            state: vec![0; dim],
            dirs: direction_numbers(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the next point to be emitted (1-based; index 0 is skipped).
    pub fn next_index(&self) -> u64 {
        self.index + 1
    }

    /// Advance to the point at `index` so the next emission is that point.
    pub fn skip_to(&mut self, index: u64) {
        if index <= self.index + 1 {
            while self.index + 1 < index {
                self.advance();
            }
            return;
        }
        while self.index + 1 < index {
            self.advance();
        }
    }

    fn advance(&mut self) {
        // Gray-code step: flip the direction of the lowest zero bit of the
        // previous index.
        let c = (!self.index).trailing_zeros() as usize;
        for (d, s) in self.state.iter_mut().enumerate() {
            *s ^= self.dirs[d][c];
        }
        self.index += 1;
    }

    /// Write the next point into `out`; values lie strictly inside (0, 1).
    pub fn next_point(&mut self, out: &mut [f64]) {
        assert_eq!(out.len(), self.dim);
        self.advance();
        for (o, &s) in out.iter_mut().zip(self.state.iter()) {
            *o = s as f64 / 4294967296.0;
        }
    }
}

/// `count` Sobol points in `(0,1)^dim` starting at sequence index
/// `start_index >= 1`.
pub fn sobol_uniform(count: usize, dim: usize, start_index: u64) -> Result<Array2<f64>> {
    assert!(start_index >= 1, "sobol index 0 is reserved");
    let mut seq = SobolSeq::new(dim)?;
    seq.skip_to(start_index);
    let mut pts = Array2::zeros((count, dim));
    let mut row = vec![0.0; dim];
    for i in 0..count {
        seq.next_point(&mut row);
        pts.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok(pts)
}

/// Sobol points mapped through the inverse standard-normal CDF.
pub fn sobol_standard_normal(count: usize, dim: usize, start_index: u64) -> Result<Array2<f64>> {
    let mut pts = sobol_uniform(count, dim, start_index)?;
    pts.mapv_inplace(inv_std_normal_cdf);
    Ok(pts)
}

/// Inverse standard-normal CDF (Wichura's AS 241 rational approximation,
/// double precision).
pub fn inv_std_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A_NEAR, r) / poly(&B_NEAR, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let v = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C_MID, r) / poly(&D_MID, r)
    } else {
        let r = r - 5.0;
        poly(&E_TAIL, r) / poly(&F_TAIL, r)
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const A_NEAR: [f64; 8] = [
    3.3871328727963666080,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const B_NEAR: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const C_MID: [f64; 8] = [
    1.42343711074968357734,
    4.63033784615654529590,
    5.76949722146069140550,
    3.64784832476320460504,
    1.27045825245236838258,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const D_MID: [f64; 8] = [
    1.0,
    2.05319162663775882187,
    1.67638483018380384940,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const E_TAIL: [f64; 8] = [
    6.65790464350110377720,
    5.46378491116411436990,
    1.78482653991729133580,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const F_TAIL: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unsupported_dimension() {
        assert!(SobolSeq::new(0).is_err());
        assert!(SobolSeq::new(SOBOL_MAX_DIM + 1).is_err());
        assert!(SobolSeq::new(8).is_ok());
    }

    #[test]
    fn first_points_match_reference_sequence() {
        // Indices 1..=8, 8 dimensions; reference values from a standard
        // unscrambled Joe-Kuo generator.
        let want: [[f64; 8]; 8] = [
            [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            [0.75, 0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75],
            [0.25, 0.75, 0.75, 0.75, 0.25, 0.25, 0.75, 0.25],
            [0.375, 0.375, 0.625, 0.875, 0.375, 0.125, 0.375, 0.875],
            [0.875, 0.875, 0.125, 0.375, 0.875, 0.625, 0.875, 0.375],
            [0.625, 0.125, 0.875, 0.625, 0.625, 0.875, 0.125, 0.125],
            [0.125, 0.625, 0.375, 0.125, 0.125, 0.375, 0.625, 0.625],
            [0.1875, 0.3125, 0.9375, 0.4375, 0.5625, 0.3125, 0.4375, 0.9375],
        ];
        let pts = sobol_uniform(8, 8, 1).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(pts[[i, j]], want[i][j], "point {i} dim {j}");
            }
        }
    }

    #[test]
    fn one_dim_first_points_and_normal_map() {
        let pts = sobol_uniform(3, 1, 1).unwrap();
        assert_eq!(pts[[0, 0]], 0.5);
        assert_eq!(pts[[1, 0]], 0.75);
        assert_eq!(pts[[2, 0]], 0.25);
        let z = sobol_standard_normal(1, 1, 1).unwrap();
        assert_eq!(z[[0, 0]], 0.0);
    }

    #[test]
    fn skip_to_matches_fresh_stream() {
        let all = sobol_uniform(20, 5, 1).unwrap();
        let tail = sobol_uniform(10, 5, 11).unwrap();
        for i in 0..10 {
            for j in 0..5 {
                assert_eq!(tail[[i, j]], all[[10 + i, j]]);
            }
        }
    }

    #[test]
    fn inverse_normal_matches_reference_quantiles() {
        // Reference values computed with an independent high-precision
        // implementation of the normal quantile function.
        let cases = [
            (1e-9, -5.9978070150076865),
            (0.025, -1.9599639845400545),
            (0.1, -1.2815515655446004),
            (0.3, -0.5244005127080409),
            (0.5, 0.0),
            (0.7, 0.5244005127080407),
            (0.84, 0.994457883209753),
            (0.975, 1.959963984540054),
            (1.0 - 1e-9, 5.997807019601637),
        ];
        for (p, want) in cases {
            let got = inv_std_normal_cdf(p);
            assert!(
                (got - want).abs() < 1e-9 * (1.0 + want.abs()),
                "p = {p}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn mapped_points_have_standard_moments() {
        let count = 1 << 14;
        for dim in [1, 4, 8] {
            let z = sobol_standard_normal(count, dim, 1).unwrap();
            for j in 0..dim {
                let col = z.column(j);
                let mean = col.sum() / count as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / count as f64;
                assert!(mean.abs() < 1e-2, "dim {j} mean {mean}");
                assert!((var - 1.0).abs() < 2e-2, "dim {j} var {var}");
            }
        }
    }
}
