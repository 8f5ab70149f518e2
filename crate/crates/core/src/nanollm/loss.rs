use crate::error::{shape_err, Result};
use crate::numcore::Matrix;

/// Mean softmax cross-entropy over rows of `logits` and the gradient
/// `(softmax − onehot) / n`.
pub fn cross_entropy_and_grad(logits: &Matrix, targets: &[u8]) -> Result<(f64, Matrix)> {
    let (n, v) = logits.shape();
    if targets.len() != n {
        return shape_err(format!("{} targets for {n} rows of logits", targets.len()));
    }
    let mut grad = Matrix::zeros(n, v);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let g = grad.row_mut(i);
        let mut sum = 0.0;
        for (gj, &x) in g.iter_mut().zip(row) {
            *gj = (x - max).exp();
            sum += *gj;
        }
        total += sum.ln() + max - row[t as usize];
        for gj in g.iter_mut() {
            *gj /= sum * n as f64;
        }
        g[t as usize] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Summed (not averaged) negative log-likelihood of each row.
pub(crate) fn nll_sum(logits: &Matrix, targets: &[u8]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        total += sum.ln() + max - row[t as usize];
    }
    total
}
