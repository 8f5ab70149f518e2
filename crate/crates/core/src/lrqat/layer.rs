use crate::downcast::{downcast_tensor, upcast_tensor, DowncastFormat, DowncastTensor};
use crate::error::{shape_err, Error, Result};
use crate::numcore::{matmul, matmul_nt, matmul_tn, rand_uniform, truncated_svd, Matrix, Rng};
use crate::quantsim::{
    dequantize_code, quantize_activations_per_token, round_half_even, IntMatrix, QuantParams,
    QuantSpec,
};

use super::FusedLayer;

/// One LR-QAT linear layer with weight shape `m × k` (output × input).
#[derive(Debug, Clone)]
pub struct LrQatLayer {
    phi0: DowncastTensor,
    /// `m × r`
    pub a: Matrix,
    /// `r × k`
    pub b: Matrix,
    /// Trainable scale, initialized to `s₀`.
    pub scale: Matrix,
    zero: Vec<i32>,
    s0: Matrix,
    spec: QuantSpec,
    alpha: f64,
    rank: usize,
}

/// Quantized weight and the values the backward pass needs.
#[derive(Debug, Clone)]
pub struct WeightQuant {
    pub w_hat: Matrix,
    pub codes: IntMatrix,
    /// 1 where `round(P) + z₀` was inside the code range.
    pub mask: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub da: Matrix,
    pub db: Matrix,
    pub ds: Matrix,
    pub dx: Matrix,
}

/// Forward output together with the quantizer intermediates, for the
/// non-checkpointed path.
#[derive(Debug, Clone)]
pub struct CachedForward {
    pub y: Matrix,
    pub p: Matrix,
    pub quant: WeightQuant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamReport {
    pub adapter_params: usize,
    pub scale_params: usize,
    pub trainable_params: usize,
    pub frozen_weight_bytes: usize,
    pub adapter_ratio: f64,
}

/// `r(m + k) / (m k)`.
pub fn adapter_ratio(m: usize, k: usize, r: usize) -> f64 {
    (r * (m + k)) as f64 / (m * k) as f64
}

impl LrQatLayer {
    /// Builds a layer from pretrained `w0` and the ranges `s₀, z₀` fitted to
    /// it. Adapters start at zero; call [`init_lora`](Self::init_lora) or
    /// [`init_loftq`](Self::init_loftq) next.
    pub fn new(
        w0: &Matrix,
        params: &QuantParams,
        spec: QuantSpec,
        format: DowncastFormat,
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        let (m, k) = w0.shape();
        spec.validate()?;
        params.check(&spec, m, k)?;
        format.validate()?;
        if rank == 0 || rank >= m.min(k) {
            return shape_err(format!("rank {rank} must satisfy 1 <= r < min({m}, {k})"));
        }
        if spec.symmetric && params.zero.iter().any(|&z| z != 0) {
            return Err(Error::Config("symmetric spec with non-zero offsets".into()));
        }
        if !params.scale.data().iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Numeric("scales must be positive and finite".into()));
        }
        let s0 = params.scale.clone();
        let mut layer = Self {
            phi0: downcast_tensor(&Matrix::zeros(m, k), format)?,
            a: Matrix::zeros(m, rank),
            b: Matrix::zeros(rank, k),
            scale: s0.clone(),
            zero: params.zero.clone(),
            s0,
            spec,
            alpha,
            rank,
        };
        let v = layer.normalized(w0);
        layer.phi0 = layer.store(&v)?;
        Ok(layer)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.phi0.shape()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn zero(&self) -> &[i32] {
        &self.zero
    }

    pub fn initial_scale(&self) -> &Matrix {
        &self.s0
    }

    pub fn phi0(&self) -> &DowncastTensor {
        &self.phi0
    }

    pub fn format(&self) -> DowncastFormat {
        self.phi0.format()
    }

    /// Reassembles a layer from serialized parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        phi0: DowncastTensor,
        a: Matrix,
        b: Matrix,
        scale: Matrix,
        s0: Matrix,
        zero: Vec<i32>,
        spec: QuantSpec,
        alpha: f64,
    ) -> Result<Self> {
        let (m, k) = phi0.shape();
        let rank = a.cols();
        if a.rows() != m || b.shape() != (rank, k) || rank == 0 {
            return shape_err(format!(
                "adapters {:?} / {:?} do not fit a {m}x{k} layer",
                a.shape(),
                b.shape()
            ));
        }
        QuantParams {
            scale: scale.clone(),
            zero: zero.clone(),
        }
        .check(&spec, m, k)?;
        if s0.shape() != scale.shape() {
            return shape_err("initial scale shape differs from scale");
        }
        Ok(Self {
            phi0,
            a,
            b,
            scale,
            zero,
            s0,
            spec,
            alpha,
            rank,
        })
    }

    fn block_params(&self) -> impl Fn(usize, usize) -> usize {
        let (m, k) = self.shape();
        let map = self.spec.blocks(m, k);
        move |i, j| map.index(i, j)
    }

    /// `W₀ / s₀`, blockwise.
    fn normalized(&self, w0: &Matrix) -> Matrix {
        let idx = self.block_params();
        let s0 = self.s0.data();
        Matrix::from_fn(w0.rows(), w0.cols(), |i, j| w0.get(i, j) / s0[idx(i, j)])
    }

    /// Stores `v` shifted by `z₀`, so the bounded formats clip to exactly
    /// the code range of the quantizer. No-op shift when symmetric.
    fn store(&self, v: &Matrix) -> Result<DowncastTensor> {
        let idx = self.block_params();
        let shifted = Matrix::from_fn(v.rows(), v.cols(), |i, j| {
            v.get(i, j) + self.zero[idx(i, j)] as f64
        });
        downcast_tensor(&shifted, self.phi0.format())
    }

    fn load(&self, t: &DowncastTensor) -> Matrix {
        let idx = self.block_params();
        let mut v = upcast_tensor(t);
        let k = v.cols();
        for (n, x) in v.data_mut().iter_mut().enumerate() {
            *x -= self.zero[idx(n / k, n % k)] as f64;
        }
        v
    }

    /// `φ⁻¹(Φ₀)` in the unshifted domain.
    pub fn phi0_values(&self) -> Matrix {
        self.load(&self.phi0)
    }

    /// `B = 0`, `A ~ U(−√(6/m), √(6/m))`.
    pub fn init_lora(&mut self, rng: &mut Rng) {
        let (m, k) = self.shape();
        let bound = (6.0 / m as f64).sqrt();
        self.a = rand_uniform(rng, m, self.rank, -bound, bound);
        self.b = Matrix::zeros(self.rank, k);
    }

    /// Alternating downcast / truncated-SVD initialization of `A`, `B` so the
    /// adapters absorb the residual the storage format throws away. `w0`
    /// must be the same matrix the layer was built from.
    pub fn init_loftq(&mut self, w0: &Matrix, iterations: usize) -> Result<()> {
        if iterations == 0 {
            return Err(Error::Config("LoftQ needs at least one iteration".into()));
        }
        let (m, k) = self.shape();
        let v = self.normalized(w0);
        let ratio = self.alpha / self.rank as f64;
        let mut a = Matrix::zeros(m, self.rank);
        let mut b = Matrix::zeros(self.rank, k);
        let mut phi = self.phi0.clone();
        for _ in 0..iterations {
            let ab = matmul(&a, &b)?;
            let mut target = v.clone();
            target.axpy(-ratio, &ab)?;
            phi = self.store(&target)?;
            let residual = v.sub(&self.load(&phi))?.scale(1.0 / ratio);
            let svd = truncated_svd(&residual, self.rank)?;
            let root: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
            a = Matrix::from_fn(m, self.rank, |i, j| svd.u.get(i, j) * root[j]);
            b = Matrix::from_fn(self.rank, k, |i, j| root[i] * svd.v.get(j, i));
        }
        self.phi0 = phi;
        self.a = a;
        self.b = b;
        Ok(())
    }

    /// `P = φ⁻¹(Φ₀) + (α/r)·A·B`.
    pub fn preactivation(&self) -> Matrix {
        let mut p = self.phi0_values();
        let ab = matmul(&self.a, &self.b).expect("adapter shapes checked");
        p.axpy(self.alpha / self.rank as f64, &ab)
            .expect("adapter shapes checked");
        p
    }

    fn quantize(&self, p: &Matrix) -> WeightQuant {
        let (m, k) = self.shape();
        let idx = self.block_params();
        let (qmin, qmax) = (self.spec.qmin() as f64, self.spec.qmax() as f64);
        let s = self.scale.data();
        let mut w_hat = Matrix::zeros(m, k);
        let mut mask = Matrix::zeros(m, k);
        let mut codes = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                let blk = idx(i, j);
                let z = self.zero[blk];
                let t = round_half_even(p.get(i, j)) + z as f64;
                if t >= qmin && t <= qmax {
                    mask.set(i, j, 1.0);
                }
                let code = t.clamp(qmin, qmax) as i32;
                codes.push(code);
                w_hat.set(i, j, dequantize_code(s[blk], code, z));
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

    /// Quantized weight `Ŵ`, integer codes and pass-through mask.
    pub fn forward_weight(&self) -> WeightQuant {
        self.quantize(&self.preactivation())
    }

    /// `y = Ŵ x` with `x` laid out `k × n` (one column per sample). With
    /// `act_bits`, `x` is first quantized per token, i.e. per column.
    pub fn forward(&self, x: &Matrix, act_bits: Option<u8>) -> Result<Matrix> {
        let x = prepare_input(x, act_bits)?;
        let w = self.forward_weight().w_hat;
        matmul(&w, &x)
    }

    /// Forward pass that also returns the quantizer intermediates.
    pub fn forward_cached(&self, x: &Matrix, act_bits: Option<u8>) -> Result<CachedForward> {
        let xq = prepare_input(x, act_bits)?;
        let p = self.preactivation();
        let quant = self.quantize(&p);
        let y = matmul(&quant.w_hat, &xq)?;
        Ok(CachedForward { y, p, quant })
    }

    /// Gradients of `A`, `B` and `s` given `G = ∂L/∂Ŵ` and the quantizer
    /// state that produced `Ŵ`.
    pub fn param_grads(&self, quant: &WeightQuant, g: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let (m, k) = self.shape();
        if g.shape() != (m, k) {
            return shape_err(format!("weight gradient {:?} for a {m}x{k} layer", g.shape()));
        }
        let idx = self.block_params();
        let s = self.scale.data();
        let mut dp = Matrix::zeros(m, k);
        let mut ds = Matrix::zeros(self.scale.rows(), self.scale.cols());
        for i in 0..m {
            for j in 0..k {
                let blk = idx(i, j);
                let gij = g.get(i, j);
                dp.set(i, j, gij * quant.mask.get(i, j) * s[blk]);
                ds.data_mut()[blk] += gij * (quant.codes.get(i, j) - self.zero[blk]) as f64;
            }
        }
        let ratio = self.alpha / self.rank as f64;
        let da = matmul_nt(&dp, &self.b)?.scale(ratio);
        let db = matmul_tn(&self.a, &dp)?.scale(ratio);
        Ok((da, db, ds))
    }

    /// Parameter gradients with the quantizer recomputed from `A`, `B`, `Φ₀`.
    pub fn recompute_param_grads(&self, g: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let quant = self.forward_weight();
        self.param_grads(&quant, g)
    }

    /// Backward pass for [`forward`](Self::forward) with the quantizer
    /// recomputed here. Activation quantization is straight-through.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, act_bits: Option<u8>) -> Result<LayerGrads> {
        let quant = self.forward_weight();
        self.backward_with(&quant, x, dy, act_bits)
    }

    /// Backward pass reusing intermediates kept by
    /// [`forward_cached`](Self::forward_cached).
    pub fn backward_cached(
        &self,
        cache: &CachedForward,
        x: &Matrix,
        dy: &Matrix,
        act_bits: Option<u8>,
    ) -> Result<LayerGrads> {
        self.backward_with(&cache.quant, x, dy, act_bits)
    }

    fn backward_with(
        &self,
        quant: &WeightQuant,
        x: &Matrix,
        dy: &Matrix,
        act_bits: Option<u8>,
    ) -> Result<LayerGrads> {
        let xq = prepare_input(x, act_bits)?;
        let g = matmul_nt(dy, &xq)?;
        let (da, db, ds) = self.param_grads(quant, &g)?;
        let dx = matmul_tn(&quant.w_hat, dy)?;
        Ok(LayerGrads { da, db, ds, dx })
    }

    /// Folds the adapters into one integer matrix.
    pub fn fuse(&self) -> Result<FusedLayer> {
        let quant = self.forward_weight();
        FusedLayer::new(
            quant.codes,
            self.scale.clone(),
            self.zero.clone(),
            self.spec,
        )
    }

    pub fn parameter_report(&self) -> ParamReport {
        let (m, k) = self.shape();
        let adapter_params = self.rank * (m + k);
        let scale_params = self.scale.len();
        ParamReport {
            adapter_params,
            scale_params,
            trainable_params: adapter_params + scale_params,
            frozen_weight_bytes: self.phi0.payload().len(),
            adapter_ratio: adapter_ratio(m, k, self.rank),
        }
    }

    /// Numerical rank of `W_Z − W_Z(A·B = 0)`: how much the low-rank update
    /// changed the integer weights after rounding.
    pub fn integer_perturbation_rank(&self) -> Result<usize> {
        let (m, k) = self.shape();
        let trained = self.forward_weight().codes;
        let base = self.quantize(&self.phi0_values()).codes;
        let diff = Matrix::from_fn(m, k, |i, j| (trained.get(i, j) - base.get(i, j)) as f64);
        if diff.max_abs() == 0.0 {
            return Ok(0);
        }
        let svd = truncated_svd(&diff, m.min(k))?;
        let tol = svd.s[0] * 1e-9 * m.max(k) as f64;
        Ok(svd.s.iter().filter(|&&s| s > tol).count())
    }
}

/// Columns of `x` are tokens here, so per-token quantization runs on `xᵀ`.
fn prepare_input(x: &Matrix, act_bits: Option<u8>) -> Result<Matrix> {
    match act_bits {
        None => Ok(x.clone()),
        Some(b) => Ok(quantize_activations_per_token(&x.transpose(), b)?.0.transpose()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downcast::dc_inv_fixed_point;
    use crate::numcore::{finite_diff, randn};
    use crate::quantsim::{estimate_minmax, fake_quant, Granularity};

    /// The 1×2 layer used by the hand-worked examples: Φ₀ = Q4.4 codes
    /// [24, −16], A = [[0.5]], B = [[0.2, −0.4]], α = 1, s = 0.25.
    fn hand_layer() -> LrQatLayer {
        let spec = QuantSpec::new(4, true, Granularity::PerTensor).unwrap();
        let s = Matrix::filled(1, 1, 0.25);
        let phi0 = downcast_tensor(
            &Matrix::from_rows(&[[dc_inv_fixed_point(24, 4), dc_inv_fixed_point(-16, 4)]]),
            DowncastFormat::FixedPoint(4),
        )
        .unwrap();
        // m = 1 leaves no room for r < min(m, k); assemble directly.
        LrQatLayer::from_parts(
            phi0,
            Matrix::from_rows(&[[0.5]]),
            Matrix::from_rows(&[[0.2, -0.4]]),
            s.clone(),
            s,
            vec![0],
            spec,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn hand_example_forward_weight() {
        let layer = hand_layer();
        assert_eq!(layer.phi0().payload(), &[24u8, (-16i8) as u8]);
        assert_eq!(layer.phi0_values().data(), &[1.5, -1.0]);
        let p = layer.preactivation();
        assert!((p.get(0, 0) - 1.6).abs() < 1e-15 && (p.get(0, 1) + 1.2).abs() < 1e-15);
        let q = layer.forward_weight();
        assert_eq!(q.codes.data, vec![2, -1]);
        assert_eq!(q.w_hat.data(), &[0.5, -0.25]);
        assert_eq!(q.mask.data(), &[1.0, 1.0]);
    }

    #[test]
    fn hand_example_forward_and_backward() {
        let layer = hand_layer();
        let x = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(layer.forward(&x, None).unwrap().data(), &[0.25]);

        let dy = Matrix::from_rows(&[[1.0]]);
        let g = layer.backward(&x, &dy, None).unwrap();
        assert_eq!(g.ds.data(), &[1.0]);
        assert!((g.da.get(0, 0) + 0.05).abs() < 1e-15);
        assert_eq!(g.db.data(), &[0.125, 0.125]);
        assert_eq!(g.dx.data(), &[0.5, -0.25]);
    }

    #[test]
    fn hand_example_fuses_exactly() {
        let layer = hand_layer();
        let fused = layer.fuse().unwrap();
        assert_eq!(fused.codes().data, vec![2, -1]);
        assert_eq!(fused.dequantize().data(), &[0.5, -0.25]);
    }

    #[test]
    fn saturated_adapters_block_adapter_gradients() {
        let mut layer = hand_layer();
        layer.a = Matrix::from_rows(&[[1e3]]);
        layer.b = Matrix::from_rows(&[[1.0, -1.0]]);
        let q = layer.forward_weight();
        assert_eq!(q.codes.data, vec![7, -8]);
        assert_eq!(q.mask.data(), &[0.0, 0.0]);
        let (da, db, ds) = layer.param_grads(&q, &Matrix::from_rows(&[[1.0, 1.0]])).unwrap();
        assert_eq!(da, Matrix::zeros(1, 1));
        assert_eq!(db, Matrix::zeros(1, 2));
        assert_eq!(ds.data(), &[7.0 - 8.0]);
    }

    fn random_layer(rng: &mut Rng, format: DowncastFormat) -> (LrQatLayer, Matrix) {
        let w0 = randn(rng, 6, 8);
        let spec = QuantSpec::new(4, true, Granularity::PerChannel).unwrap();
        let params = estimate_minmax(&w0, &spec).unwrap();
        (LrQatLayer::new(&w0, &params, spec, format, 2, 1.0).unwrap(), w0)
    }

    #[test]
    fn lora_init_matches_rtn_of_phi0() {
        let mut rng = Rng::new(3);
        let (mut layer, _) = random_layer(&mut rng, DowncastFormat::Bf16);
        let pristine = layer.clone();
        layer.init_lora(&mut rng);
        assert_eq!(layer.b, Matrix::zeros(2, 8));
        assert!(layer.a.frobenius_norm() > 0.0);
        let bound = (6.0f64 / 6.0).sqrt();
        assert!(layer.a.data().iter().all(|x| x.abs() <= bound));

        // With A·B = 0 the layer is plain RTN of φ⁻¹(Φ₀) on a unit grid,
        // rescaled by s₀.
        let spec = *layer.spec();
        let unit = QuantParams::symmetric(Matrix::filled(6, 1, 1.0));
        let rtn = fake_quant(&layer.phi0_values(), &spec, &unit).unwrap();
        let q = layer.forward_weight();
        assert_eq!(q.codes, rtn.codes);
        let s0 = layer.initial_scale();
        for i in 0..6 {
            for j in 0..8 {
                assert_eq!(q.w_hat.get(i, j), s0.get(i, 0) * rtn.codes.get(i, j) as f64);
            }
        }

        let mut x = pristine.clone();
        let mut y = pristine;
        x.init_lora(&mut Rng::new(42));
        y.init_lora(&mut Rng::new(42));
        assert_eq!(x.a, y.a);
    }

    #[test]
    fn loftq_on_integer_targets_is_zero() {
        let w0 = Matrix::from_fn(4, 4, |i, j| ((i * 4 + j) % 7) as f64 - 3.0);
        let spec = QuantSpec::new(4, true, Granularity::PerTensor).unwrap();
        let params = QuantParams::symmetric(Matrix::filled(1, 1, 1.0));
        let mut layer =
            LrQatLayer::new(&w0, &params, spec, DowncastFormat::IntPacked(4), 2, 1.0).unwrap();
        layer.init_loftq(&w0, 1).unwrap();
        let ab = matmul(&layer.a, &layer.b).unwrap();
        assert!(ab.max_abs() < 1e-12);
        assert_eq!(layer.phi0_values(), w0);
    }

    #[test]
    fn loftq_absorbs_low_rank_fractional_part() {
        // Integers plus a small rank-3 perturbation: rounding recovers the
        // integers and the residual has rank 3, which r = 3 captures.
        let mut rng = Rng::new(8);
        let ints = Matrix::from_fn(4, 4, |i, j| ((i + 2 * j) % 5) as f64 - 2.0);
        let low = matmul(&randn(&mut rng, 4, 3), &randn(&mut rng, 3, 4)).unwrap();
        let v = ints.add(&low.scale(0.4 / low.max_abs())).unwrap();
        let spec = QuantSpec::new(4, true, Granularity::PerTensor).unwrap();
        let params = QuantParams::symmetric(Matrix::filled(1, 1, 1.0));
        let mut layer =
            LrQatLayer::new(&v, &params, spec, DowncastFormat::IntPacked(4), 3, 1.0).unwrap();
        layer.init_loftq(&v, 1).unwrap();
        let residual = v.sub(&layer.preactivation()).unwrap().frobenius_norm();
        assert!(residual < 1e-6, "{residual}");
    }

    #[test]
    fn loftq_residual_is_the_svd_tail() {
        let mut rng = Rng::new(18);
        let w0 = randn(&mut rng, 5, 6);
        let spec = QuantSpec::new(3, true, Granularity::PerChannel).unwrap();
        let params = estimate_minmax(&w0, &spec).unwrap();
        let mut layer =
            LrQatLayer::new(&w0, &params, spec, DowncastFormat::IntPacked(3), 2, 1.0).unwrap();
        let v = layer.normalized(&w0);
        let fractional = v.sub(&layer.phi0_values()).unwrap();
        layer.init_loftq(&w0, 1).unwrap();
        let residual = v.sub(&layer.preactivation()).unwrap().frobenius_norm();
        let full = truncated_svd(&fractional, 5).unwrap();
        let tail = full.s[2..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((residual - tail).abs() < 1e-9, "{residual} vs {tail}");
        assert!(residual < fractional.frobenius_norm());
    }

    #[test]
    fn lr_qat_gradients_match_ste_surrogate() {
        let mut rng = Rng::new(4);
        let (mut layer, _) = random_layer(&mut rng, DowncastFormat::Fp32);
        layer.init_lora(&mut rng);
        layer.b = randn(&mut rng, 2, 8).scale(0.05);
        let x = randn(&mut rng, 8, 3);
        let dy = randn(&mut rng, 6, 3);
        let grads = layer.backward(&x, &dy, None).unwrap();

        let base = layer.forward_weight();
        let p0 = layer.preactivation();
        let scale_full = QuantParams::symmetric(layer.scale.clone()).broadcast_scale(layer.spec(), 6, 8);
        // Surrogate: round(P) replaced by P + (round(P₀) − P₀) on unclipped
        // entries, held constant on clipped ones.
        let surrogate = |l: &LrQatLayer| {
            let p = l.preactivation();
            let w = Matrix::from_fn(6, 8, |i, j| {
                if base.mask.get(i, j) == 1.0 {
                    scale_full.get(i, j) * (p.get(i, j) + base.codes.get(i, j) as f64 - p0.get(i, j))
                } else {
                    base.w_hat.get(i, j)
                }
            });
            matmul(&w, &x).unwrap().hadamard(&dy).unwrap().sum()
        };
        let num_da = finite_diff(
            |a| {
                let mut l = layer.clone();
                l.a = a.clone();
                surrogate(&l)
            },
            &layer.a,
            1e-6,
        );
        let num_db = finite_diff(
            |b| {
                let mut l = layer.clone();
                l.b = b.clone();
                surrogate(&l)
            },
            &layer.b,
            1e-6,
        );
        for (n, a) in num_da.data().iter().zip(grads.da.data()) {
            assert!((n - a).abs() <= 1e-6 * a.abs().max(1.0), "{n} vs {a}");
        }
        for (n, a) in num_db.data().iter().zip(grads.db.data()) {
            assert!((n - a).abs() <= 1e-6 * a.abs().max(1.0), "{n} vs {a}");
        }
    }

    #[test]
    fn checkpointed_backward_equals_cached() {
        let mut rng = Rng::new(5);
        let (mut layer, _) = random_layer(&mut rng, DowncastFormat::FixedPoint(4));
        layer.init_lora(&mut rng);
        layer.b = randn(&mut rng, 2, 8).scale(0.1);
        let x = randn(&mut rng, 8, 4);
        let dy = randn(&mut rng, 6, 4);
        let cache = layer.forward_cached(&x, Some(8)).unwrap();
        assert_eq!(cache.y, layer.forward(&x, Some(8)).unwrap());
        let a = layer.backward(&x, &dy, Some(8)).unwrap();
        let b = layer.backward_cached(&cache, &x, &dy, Some(8)).unwrap();
        assert_eq!(a.da, b.da);
        assert_eq!(a.db, b.db);
        assert_eq!(a.ds, b.ds);
        assert_eq!(a.dx, b.dx);
    }

    #[test]
    fn identity_probe_returns_weight_columns() {
        let mut rng = Rng::new(6);
        let (mut layer, _) = random_layer(&mut rng, DowncastFormat::Bf16);
        layer.init_lora(&mut rng);
        let y = layer.forward(&Matrix::identity(8), None).unwrap();
        assert_eq!(y, layer.forward_weight().w_hat);
    }

    #[test]
    fn activation_quant_error_is_small() {
        let mut rng = Rng::new(7);
        let (layer, _) = random_layer(&mut rng, DowncastFormat::Fp32);
        let x = randn(&mut rng, 8, 5);
        let exact = layer.forward(&x, None).unwrap();
        let quant = layer.forward(&x, Some(8)).unwrap();
        let w = layer.forward_weight().w_hat;
        // |Ŵ(x̂ − x)| ≤ Σ|Ŵ_ij| · s_t / 2 per output.
        let scales = crate::quantsim::per_token_scales(&x.transpose(), 8);
        for i in 0..6 {
            let row_l1: f64 = w.row(i).iter().map(|v| v.abs()).sum();
            for (t, s) in scales.iter().enumerate() {
                assert!((quant.get(i, t) - exact.get(i, t)).abs() <= row_l1 * s / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn report_counts() {
        assert_eq!(adapter_ratio(4096, 4096, 32), 0.015625);
        assert_eq!(adapter_ratio(16, 16, 0), 0.0);
        let w0 = randn(&mut Rng::new(1), 8, 8);
        let spec = QuantSpec::new(4, true, Granularity::PerChannel).unwrap();
        let params = estimate_minmax(&w0, &spec).unwrap();
        let layer = LrQatLayer::new(&w0, &params, spec, DowncastFormat::IntPacked(4), 2, 1.0).unwrap();
        let r = layer.parameter_report();
        assert_eq!(r.frozen_weight_bytes, 32);
        assert_eq!(r.trainable_params, 2 * 16 + 8);
    }

    #[test]
    fn constructor_validation() {
        let w0 = Matrix::zeros(4, 4);
        let spec = QuantSpec::new(4, true, Granularity::PerTensor).unwrap();
        let params = QuantParams::symmetric(Matrix::filled(1, 1, 1.0));
        assert!(LrQatLayer::new(&w0, &params, spec, DowncastFormat::Fp32, 4, 1.0).is_err());
        assert!(LrQatLayer::new(&w0, &params, spec, DowncastFormat::Fp32, 0, 1.0).is_err());
        let bad = QuantParams::symmetric(Matrix::filled(4, 1, 1.0));
        assert!(LrQatLayer::new(&w0, &bad, spec, DowncastFormat::Fp32, 1, 1.0).is_err());
    }

    #[test]
    fn integer_perturbation_rank_of_zero_adapters() {
        let (layer, _) = random_layer(&mut Rng::new(9), DowncastFormat::Fp32);
        assert_eq!(layer.integer_perturbation_rank().unwrap(), 0);
    }
}
