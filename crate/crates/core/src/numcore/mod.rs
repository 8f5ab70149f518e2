//! Deterministic dense linear algebra in `f64`.

mod matrix;
mod rng;
mod svd;

pub use matrix::{dot, matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{rand_uniform, randn, Rng};
pub use svd::{truncated_svd, Svd, MAX_SWEEPS, OFF_DIAGONAL_TOL};

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff(f: impl Fn(&Matrix) -> f64, x: &Matrix, eps: f64) -> Matrix {
    assert!(eps > 0.0, "finite_diff needs eps > 0");
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[idx] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (up - down) / (2.0 * eps);
    }
    grad
}
