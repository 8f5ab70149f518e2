use crate::error::{shape_err, Result};
use crate::numcore::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::quantsim::{dequantize_code, round_half_even, IntMatrix, QuantParams, QuantSpec};

use super::{FusedLayer, WeightQuant};

/// Full-model QAT baseline: `Ŵ = s · (clip(round(W/s) + z) − z)` with both
/// `W` and `s` trainable. The learned-step-size gradient scale factor is not
/// applied.
#[derive(Debug, Clone)]
pub struct LsqLayer {
    pub w: Matrix,
    pub scale: Matrix,
    zero: Vec<i32>,
    spec: QuantSpec,
}

/// Result of [`lsq_forward_backward`].
#[derive(Debug, Clone)]
pub struct LsqOutput {
    pub y: Matrix,
    pub dw: Matrix,
    pub ds: Matrix,
    pub dx: Matrix,
}

impl LsqLayer {
    pub fn new(w: Matrix, params: QuantParams, spec: QuantSpec) -> Result<Self> {
        spec.validate()?;
        params.check(&spec, w.rows(), w.cols())?;
        Ok(Self {
            w,
            scale: params.scale,
            zero: params.zero,
            spec,
        })
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn zero(&self) -> &[i32] {
        &self.zero
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w.shape()
    }

    pub fn forward_weight(&self) -> WeightQuant {
        let (m, k) = self.w.shape();
        let map = self.spec.blocks(m, k);
        let (qmin, qmax) = (self.spec.qmin() as f64, self.spec.qmax() as f64);
        let s = self.scale.data();
        let mut w_hat = Matrix::zeros(m, k);
        let mut mask = Matrix::zeros(m, k);
        let mut codes = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                let b = map.index(i, j);
                let t = round_half_even(self.w.get(i, j) / s[b]) + self.zero[b] as f64;
                if t >= qmin && t <= qmax {
                    mask.set(i, j, 1.0);
                }
                let code = t.clamp(qmin, qmax) as i32;
                codes.push(code);
                w_hat.set(i, j, dequantize_code(s[b], code, self.zero[b]));
            }
        }
        WeightQuant {
            w_hat,
            codes: IntMatrix {
                rows: m,
                cols: k,
                data: codes,
            },
            mask,
        }
    }

    /// `(dW, ds)` from `G = ∂L/∂Ŵ`. STE for `W`; for `s`, unclipped entries
    /// contribute `round(W/s) − W/s` and clipped ones `bound − z`.
    pub fn param_grads(&self, quant: &WeightQuant, g: &Matrix) -> Result<(Matrix, Matrix)> {
        let (m, k) = self.w.shape();
        if g.shape() != (m, k) {
            return shape_err(format!("weight gradient {:?} for a {m}x{k} layer", g.shape()));
        }
        let map = self.spec.blocks(m, k);
        let s = self.scale.data();
        let dw = g.hadamard(&quant.mask)?;
        let mut ds = Matrix::zeros(self.scale.rows(), self.scale.cols());
        for i in 0..m {
            for j in 0..k {
                let b = map.index(i, j);
                let local = if quant.mask.get(i, j) == 1.0 {
                    let u = self.w.get(i, j) / s[b];
                    round_half_even(u) - u
                } else {
                    (quant.codes.get(i, j) - self.zero[b]) as f64
                };
                ds.data_mut()[b] += g.get(i, j) * local;
            }
        }
        Ok((dw, ds))
    }

    pub fn fuse(&self) -> Result<FusedLayer> {
        let quant = self.forward_weight();
        FusedLayer::new(quant.codes, self.scale.clone(), self.zero.clone(), self.spec)
    }
}

/// One forward/backward through an LSQ layer with `x` laid out `k × n`.
pub fn lsq_forward_backward(
    w: &Matrix,
    params: &QuantParams,
    spec: &QuantSpec,
    x: &Matrix,
    dy: &Matrix,
) -> Result<LsqOutput> {
    let layer = LsqLayer::new(w.clone(), params.clone(), *spec)?;
    let quant = layer.forward_weight();
    let y = matmul(&quant.w_hat, x)?;
    let g = matmul_nt(dy, x)?;
    let (dw, ds) = layer.param_grads(&quant, &g)?;
    let dx = matmul_tn(&quant.w_hat, dy)?;
    Ok(LsqOutput { y, dw, ds, dx })
}
