//! Truncated SVD by one-sided (Hestenes) Jacobi.
//!
//! The rotations act on the columns of whichever orientation of the input
//! has fewer columns, so the implicit Gram matrix is `min(m, n)` square.

use super::{matmul, Matrix};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Rank-`r` factors: `m ≈ u · diag(s) · vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, &sv) in self.s.iter().enumerate() {
                let x = us.get(i, j) * sv;
                us.set(i, j, x);
            }
        }
        matmul(&us, &self.v.transpose()).expect("factor shapes agree")
    }
}

pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if rank == 0 || rank > rows.min(cols) {
        return Err(Error::Shape(format!(
            "rank {rank} outside 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )));
    }
    if rows >= cols {
        let (u, s, v) = jacobi_tall(m)?;
        Ok(truncate(u, s, v, rank))
    } else {
        let (v, s, u) = jacobi_tall(&m.transpose())?;
        Ok(truncate(u, s, v, rank))
    }
}

type Factors = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// Full thin SVD of a matrix with `rows >= cols`. Returns columns of U and V
/// (as vectors) sorted by descending singular value.
fn jacobi_tall(m: &Matrix) -> Result<Factors> {
    let (p, q) = m.shape();
    let mut w: Vec<Vec<f64>> = (0..q).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..q).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = q < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let alpha = norm_sq(&w[i]);
                let beta = norm_sq(&w[j]);
                let gamma = dot(&w[i], &w[j]);
                if gamma == 0.0 || gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<(f64, usize)> = w.iter().map(|c| norm_sq(c).sqrt()).zip(0..q).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let sigma_max = order.first().map_or(0.0, |o| o.0);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut s_out = Vec::with_capacity(q);
    let mut v_cols = Vec::with_capacity(q);
    for &(sigma, idx) in &order {
        let col = if sigma > sigma_max * 1e-13 && sigma > 0.0 {
            w[idx].iter().map(|x| x / sigma).collect()
        } else {
            orthonormal_complement(&u_cols, p)
        };
        u_cols.push(col);
        s_out.push(sigma);
        v_cols.push(v[idx].clone());
    }
    Ok((u_cols, s_out, v_cols))
}

fn truncate(u: Vec<Vec<f64>>, s: Vec<f64>, v: Vec<Vec<f64>>, rank: usize) -> Svd {
    let to_matrix = |cols: &[Vec<f64>]| {
        let n = cols[0].len();
        Matrix::from_fn(n, rank, |i, j| cols[j][i])
    };
    Svd {
        u: to_matrix(&u[..rank]),
        s: s[..rank].to_vec(),
        v: to_matrix(&v[..rank]),
    }
}

/// A unit vector orthogonal to every vector in `basis` (all of length `n`).
fn orthonormal_complement(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    for e in 0..n {
        let mut x = vec![0.0; n];
        x[e] = 1.0;
        // Two passes of Gram-Schmidt.
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&x, b);
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= proj * bi;
                }
            }
        }
        let norm = norm_sq(&x).sqrt();
        if norm > 0.5 {
            return x.iter().map(|xi| xi / norm).collect();
        }
    }
    unreachable!("basis of size {} spans R^{n}", basis.len())
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (a, b) = (&mut left[i], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xi, yi) = (*x, *y);
        *x = c * xi - s * yi;
        *y = s * xi + c * yi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}
