use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::numcore::Matrix;

/// Adam moments for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl OptimState {
    pub fn zeros_like(param: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(param.rows(), param.cols()),
            v: Matrix::zeros(param.rows(), param.cols()),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay
/// `param −= lr·wd·param`.
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut OptimState,
    lr: f64,
    opt: AdamW,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != param.shape() {
        return shape_err(format!(
            "param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= lr * weight_decay * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

/// Linear warmup over the first `⌊warmup_fraction·steps⌋` steps, then
/// linear decay reaching zero at `steps`.
pub fn lr_at(step: usize, steps: usize, warmup_fraction: f64, lr_max: f64) -> f64 {
    let warmup = (warmup_fraction * steps as f64).floor() as usize;
    if step < warmup {
        lr_max * (step + 1) as f64 / warmup as f64
    } else if step >= steps {
        0.0
    } else {
        lr_max * (steps - step) as f64 / (steps - warmup) as f64
    }
}

/// Scales every gradient by `max_norm / norm` when the global L² norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Matrix::filled(1, 3, 0.5);
        let g = Matrix::filled(1, 3, 1.0);
        let mut st = OptimState::zeros_like(&p);
        adamw_step(&mut p, &g, &mut st, 1e-3, AdamW::default(), 0.0).unwrap();
        for &x in p.data() {
            assert!((x - (0.5 - 1e-3)).abs() < 1e-10, "{x}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.25]]);
        let orig = p.clone();
        let mut st = OptimState::zeros_like(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &Matrix::zeros(2, 2), &mut st, 1e-2, AdamW::default(), 0.0)
                .unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn weight_decay_shrinks_regardless_of_gradient() {
        let mut p = Matrix::from_rows(&[[2.0, -2.0]]);
        let mut st = OptimState::zeros_like(&p);
        adamw_step(&mut p, &Matrix::zeros(1, 2), &mut st, 0.1, AdamW::default(), 0.5).unwrap();
        assert_eq!(p.data(), &[1.9, -1.9]);
    }

    #[test]
    fn schedule_examples() {
        assert!((lr_at(9, 100, 0.1, 1e-3) - 1e-3).abs() < 1e-18);
        assert!((lr_at(99, 100, 0.1, 1e-3) - 1e-3 / 90.0).abs() < 1e-18);
        assert_eq!(lr_at(10, 100, 0.1, 1e-3), 1e-3);
        assert!((lr_at(4, 100, 0.1, 1e-3) - 5e-4).abs() < 1e-18);
        assert!((lr_at(0, 100, 0.1, 1e-3) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_monotone_on_each_side() {
        let steps = 200;
        let lrs: Vec<f64> = (0..steps).map(|s| lr_at(s, steps, 0.1, 1.0)).collect();
        assert!(lrs[..20].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[20..].windows(2).all(|w| w[1] < w[0]));
        assert!(lrs.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn schedule_without_warmup_steps() {
        assert_eq!(lr_at(0, 5, 0.1, 1.0), 1.0);
        assert_eq!(lr_at(4, 5, 0.1, 1.0), 0.2);
    }

    #[test]
    fn clip_examples() {
        let mut g = BTreeMap::from([("a".to_string(), Matrix::from_rows(&[[3.0, 4.0]]))]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].get(0, 0) - 0.6).abs() < 1e-15);
        assert!((g["a"].get(0, 1) - 0.8).abs() < 1e-15);

        let mut g = BTreeMap::from([("a".to_string(), Matrix::from_rows(&[[0.3, 0.4]]))]);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g["a"].data(), &[0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(
            a in prop::collection::vec(-100.0f64..100.0, 1..20),
            b in prop::collection::vec(-100.0f64..100.0, 1..20),
        ) {
            let mut g = BTreeMap::from([
                ("a".to_string(), Matrix::from_vec(1, a.len(), a).unwrap()),
                ("b".to_string(), Matrix::from_vec(1, b.len(), b).unwrap()),
            ]);
            clip_global_norm(&mut g, 1.0);
            let norm = g.values().map(Matrix::sum_sq).sum::<f64>().sqrt();
            prop_assert!(norm <= 1.0 + 1e-12);
        }
    }
}
