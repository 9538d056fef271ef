//! Truncated SVD via one-sided Jacobi rotations.
//!
//! Good accuracy for the small dense matrices used here (at most a few
//! hundred rows). Columns of the wider side are orthogonalized pairwise
//! until every off-diagonal inner product is negligible.

use super::{Tensor, TensorError};

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;

/// Truncated decomposition `A ~ U * diag(s) * V^T` with `s` descending and
/// the columns of `U`/`V` orthonormal. Columns whose singular value is zero
/// are left as zero vectors.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

/// Compute the top `rank` singular triplets of a 2-D tensor.
pub fn svd_truncated(a: &Tensor, rank: usize) -> Result<Svd, TensorError> {
    if a.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "svd_truncated",
            detail: format!("expected a matrix, got {:?}", a.shape()),
        });
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if rank == 0 || rank > m.min(n) {
        return Err(TensorError::ShapeMismatch {
            op: "svd_truncated",
            detail: format!("rank {rank} out of range for {m}x{n}"),
        });
    }

    // Work on B with at least as many rows as columns; if the input is wide,
    // decompose the transpose and swap U/V at the end.
    let transposed = m < n;
    let (rows, cols, b0) = if transposed {
        (n, m, transpose_vec(a, m, n))
    } else {
        (m, n, a.data().to_vec())
    };

    // Column-major working copy of B plus the accumulated right rotations.
    let mut b = to_columns(&b0, rows, cols);
    let mut v = identity_columns(cols);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let (alpha, beta, gamma) = (dot(&b[i], &b[i]), dot(&b[j], &b[j]), dot(&b[i], &b[j]));
                let scale = (alpha * beta).sqrt();
                if scale > 0.0 {
                    max_off = max_off.max(gamma.abs() / scale);
                }
                if gamma.abs() <= OFF_DIAG_TOL * scale || scale == 0.0 {
                    continue;
                }
                // Jacobi rotation zeroing the (i, j) inner product.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut b, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if max_off <= OFF_DIAG_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(TensorError::NoConvergence);
    }

    // Singular values are the column norms; order descending.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = b.iter().map(|col| dot(col, col).sqrt()).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut s = Vec::with_capacity(rank);
    let mut u_cols = vec![vec![0.0; rows]; rank];
    let mut v_cols = vec![vec![0.0; cols]; rank];
    for (k, &col) in order.iter().take(rank).enumerate() {
        let norm = norms[col];
        s.push(norm);
        if norm > 0.0 {
            for r in 0..rows {
                u_cols[k][r] = b[col][r] / norm;
            }
        }
        v_cols[k].copy_from_slice(&v[col]);
    }

    let u = from_columns(&u_cols, rows);
    let vt = from_columns(&v_cols, cols);
    if transposed {
        Ok(Svd { u: vt, s, v: u })
    } else {
        Ok(Svd { u, s, v: vt })
    }
}

fn transpose_vec(a: &Tensor, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a.data()[r * n + c];
        }
    }
    out
}

fn to_columns(data: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..cols)
        .map(|c| (0..rows).map(|r| data[r * cols + c]).collect())
        .collect()
}

fn identity_columns(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let k = cols.len();
    let mut out = vec![0.0; rows * k];
    for (c, col) in cols.iter().enumerate() {
        for r in 0..rows {
            out[r * k + c] = col[r];
        }
    }
    Tensor::matrix(rows, k, out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    for r in 0..cols[i].len() {
        let (xi, xj) = (cols[i][r], cols[j][r]);
        cols[i][r] = c * xi - s * xj;
        cols[j][r] = s * xi + c * xj;
    }
}
