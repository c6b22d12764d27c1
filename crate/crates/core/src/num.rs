//! Dense vector/matrix primitives and stable reductions.
//!
//! Vectors are plain `&[f64]` slices; [`Matrix`] is a small row-major
//! container that only supports what the objectives need.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Norms at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument("matrix dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(dim_err("matrix element count", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * a b^T`.
    pub fn add_outer(&mut self, s: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += s * (ai * bj);
            }
        }
    }

    /// `S v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(dim_err("matrix-vector product", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|r| dot_unchecked(self.row(r), v)).collect())
    }

    /// Largest `|S_ij - S_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.rows;
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)));
        m.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err("dot product", a.len(), b.len()));
    }
    Ok(dot_unchecked(a, b))
}

pub fn norm(v: &[f64]) -> f64 {
    dot_unchecked(v, v).sqrt()
}

/// `q^T S q`.
pub fn quad_form(q: &[f64], s: &Matrix) -> Result<f64> {
    if !s.is_square() || s.rows() != q.len() {
        return Err(Error::Dimension(format!(
            "quadratic form: vector of length {} against {}x{} matrix",
            q.len(),
            s.rows(),
            s.cols()
        )));
    }
    Ok(quad_form_unchecked(q, s))
}

#[inline]
pub(crate) fn quad_form_unchecked(q: &[f64], s: &Matrix) -> f64 {
    q.iter()
        .enumerate()
        .map(|(i, &qi)| qi * dot_unchecked(s.row(i), q))
        .sum()
}

/// Result of [`l2_normalize`]; `degenerate` is set when the input norm was
/// at or below [`NORM_EPS`] and the vector was returned unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    pub norm: f64,
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let n = norm(v);
    if n > NORM_EPS {
        Normalized {
            vector: v.iter().map(|x| x / n).collect(),
            norm: n,
            degenerate: false,
        }
    } else {
        Normalized {
            vector: v.to_vec(),
            norm: n,
            degenerate: true,
        }
    }
}

/// `log sum exp(xs)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Argument("log_sum_exp of an empty sequence".into()));
    }
    Ok(lse_unchecked(xs))
}

#[inline]
pub(crate) fn lse_unchecked(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `xs` written into a new vector.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = lse_unchecked(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Cosine similarity and a degenerate flag (set when either norm vanishes,
/// in which case the similarity is reported as 0).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    let d = dot(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Ok((0.0, true));
    }
    Ok(((d / (na * nb)).clamp(-1.0, 1.0), false))
}

/// Pairwise (cascade) summation in a fixed order, so reductions are
/// bit-stable for a given input ordering.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
