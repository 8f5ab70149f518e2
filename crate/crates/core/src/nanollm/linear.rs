use std::borrow::Cow;

use crate::error::Result;
use crate::lrqat::{FusedLayer, LrQatLayer, LsqLayer, WeightQuant};
use crate::numcore::{matmul, matmul_nt, matmul_tn, Matrix};

/// A model linear layer with weight `out × in`, applied as `y = x · Ŵᵀ` to
/// token-major activations.
#[derive(Debug, Clone)]
pub enum Linear {
    Fp(Matrix),
    Lsq(LsqLayer),
    LrQat(LrQatLayer),
    Fused(FusedLayer),
}

pub(crate) struct LinearBackward {
    pub dx: Matrix,
    /// `(suffix, gradient)` for each trainable tensor of the layer.
    pub params: Vec<(&'static str, Matrix)>,
}

impl Linear {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Linear::Fp(w) => w.shape(),
            Linear::Lsq(l) => l.shape(),
            Linear::LrQat(l) => l.shape(),
            Linear::Fused(l) => l.shape(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Linear::Fp(_) => "fp",
            Linear::Lsq(_) => "lsq",
            Linear::LrQat(_) => "lrqat",
            Linear::Fused(_) => "fused",
        }
    }

    /// The weight the forward pass multiplies by.
    pub fn effective_weight(&self) -> Cow<'_, Matrix> {
        match self {
            Linear::Fp(w) => Cow::Borrowed(w),
            Linear::Lsq(l) => Cow::Owned(l.forward_weight().w_hat),
            Linear::LrQat(l) => Cow::Owned(l.forward_weight().w_hat),
            Linear::Fused(l) => Cow::Owned(l.dequantize()),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        matmul_nt(x, &self.effective_weight())
    }

    /// Gradient w.r.t. the input and, when `train` is set, the layer's own
    /// trainable tensors. Quantizers are recomputed here rather than kept
    /// from the forward pass.
    pub(crate) fn backward(
        &self,
        x: &Matrix,
        dy: &Matrix,
        train: bool,
        train_scale: bool,
    ) -> Result<LinearBackward> {
        let weight_grad = || matmul_tn(dy, x);
        let (dx, params) = match self {
            Linear::Fp(w) => {
                let params = if train {
                    vec![("w", weight_grad()?)]
                } else {
                    Vec::new()
                };
                (matmul(dy, w)?, params)
            }
            Linear::Lsq(l) => {
                let quant: WeightQuant = l.forward_weight();
                let mut params = Vec::new();
                if train {
                    let (dw, ds) = l.param_grads(&quant, &weight_grad()?)?;
                    params.push(("w", dw));
                    if train_scale {
                        params.push(("s", ds));
                    }
                }
                (matmul(dy, &quant.w_hat)?, params)
            }
            Linear::LrQat(l) => {
                let quant = l.forward_weight();
                let mut params = Vec::new();
                if train {
                    let (da, db, ds) = l.param_grads(&quant, &weight_grad()?)?;
                    params.push(("A", da));
                    params.push(("B", db));
                    if train_scale {
                        params.push(("s", ds));
                    }
                }
                (matmul(dy, &quant.w_hat)?, params)
            }
            Linear::Fused(l) => (matmul(dy, &l.dequantize())?, Vec::new()),
        };
        Ok(LinearBackward { dx, params })
    }

    /// Mutable access to a trainable tensor by suffix.
    pub(crate) fn param_mut(&mut self, suffix: &str) -> Option<&mut Matrix> {
        match (self, suffix) {
            (Linear::Fp(w), "w") => Some(w),
            (Linear::Lsq(l), "w") => Some(&mut l.w),
            (Linear::Lsq(l), "s") => Some(&mut l.scale),
            (Linear::LrQat(l), "A") => Some(&mut l.a),
            (Linear::LrQat(l), "B") => Some(&mut l.b),
            (Linear::LrQat(l), "s") => Some(&mut l.scale),
            _ => None,
        }
    }

    pub(crate) fn trainable_suffixes(&self, train_scale: bool) -> Vec<&'static str> {
        match self {
            Linear::Fp(_) => vec!["w"],
            Linear::Lsq(_) if train_scale => vec!["w", "s"],
            Linear::Lsq(_) => vec!["w"],
            Linear::LrQat(_) if train_scale => vec!["A", "B", "s"],
            Linear::LrQat(_) => vec!["A", "B"],
            Linear::Fused(_) => Vec::new(),
        }
    }
}
