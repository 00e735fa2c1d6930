//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which a column is treated as
/// dependent in least-squares refits.
const RANK_TOL: f64 = 1e-10;

/// Least-squares solve `min ||a x - b||` via SVD.
///
/// Returns the minimum-norm solution together with a flag set when `a` is
/// rank deficient (some singular value below `RANK_TOL` times the largest).
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    if a.nrows() != b.len() {
        return Err(Error::invalid(format!(
            "lstsq: matrix has {} rows but rhs has length {}",
            a.nrows(),
            b.len()
        )));
    }
    if a.ncols() == 0 {
        return Ok((DVector::zeros(0), false));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = smax * RANK_TOL;
    let rank_deficient = smax == 0.0
        || a.ncols() > a.nrows()
        || svd.singular_values.iter().any(|&s| s <= cutoff);
    let x = svd
        .solve(b, cutoff)
        .map_err(|e| Error::degenerate(format!("svd solve failed: {e}")))?;
    Ok((x, rank_deficient))
}

/// Largest eigenvalue of `MᵀM` by power iteration on `v ↦ Mᵀ(Mv)`.
///
/// Runs `max_iters` steps or stops when the Rayleigh quotient changes by
/// less than `tol`. The start vector is a fixed pseudo-random direction so
/// the estimate is deterministic.
pub fn gram_spectral_norm(m: &DMatrix<f64>, max_iters: usize, tol: f64) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |i, _| (0.5 + i as f64).sin() + 1.0);
    let norm = v.norm();
    if norm == 0.0 {
        return 0.0;
    }
    v /= norm;
    let mut lambda = 0.0f64;
    for _ in 0..max_iters {
        let w = m.transpose() * (m * &v);
        let wnorm = w.norm();
        if wnorm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / wnorm;
        if (next - lambda).abs() <= tol * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Extreme squared singular values `(σ_min², σ_max²)` of a matrix, via the
/// eigenvalues of its Gram matrix. Intended for tall thin submatrices.
pub fn extreme_gram_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let gram = m.transpose() * m;
    let eigs = gram.symmetric_eigenvalues();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &e in eigs.iter() {
        lo = lo.min(e);
        hi = hi.max(e);
    }
    (lo.max(0.0), hi.max(0.0))
}

/// Column submatrix selected by (sorted) indices.
pub fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), idx.len());
    for (j, &c) in idx.iter().enumerate() {
        out.set_column(j, &m.column(c));
    }
    out
}

/// Row-major JSON form of a dense matrix, the serialization convention used
/// for dictionaries and measurement operators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut entries = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                entries.push(m[(i, j)]);
            }
        }
        MatrixJson { rows: m.nrows(), cols: m.ncols(), entries }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.entries.len() != self.rows * self.cols {
            return Err(Error::invalid(format!(
                "matrix payload has {} entries, expected {}x{}",
                self.entries.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.entries))
    }
}
