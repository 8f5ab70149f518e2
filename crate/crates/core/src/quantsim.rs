//! Simulated uniform affine quantization.
//!
//! `x̂ = s · (clip(round(x / s) + z, −2^(b−1), 2^(b−1)−1) − z)`, with rounding
//! ties going to the even integer. Scales and zero offsets are shared per
//! tensor, per output row (channel), or per contiguous group of columns
//! within a row.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::Matrix;

/// Smallest scale handed out by the estimators; keeps all-zero blocks finite.
pub const SCALE_FLOOR: f64 = 1e-12;

/// The `p` values searched by the Lᵖ range estimator.
pub const LP_GRID: [f64; 6] = [2.0, 2.4, 3.0, 3.5, 4.0, 5.0];

pub const DEFAULT_LP_CANDIDATES: usize = 100;

/// Nearest integer, ties to even.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One parameter per output row.
    PerChannel,
    /// One parameter per `g` consecutive columns of a row.
    PerGroup(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn new(bits: u8, symmetric: bool, granularity: Granularity) -> Result<Self> {
        let spec = Self {
            bits,
            symmetric,
            granularity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!("bitwidth {} outside 2..=8", self.bits)));
        }
        if self.granularity == Granularity::PerGroup(0) {
            return Err(Error::Config("group size must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn qmin(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    #[inline]
    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if rows == 0 || cols == 0 {
            return shape_err(format!("cannot quantize an empty {rows}x{cols} tensor"));
        }
        if let Granularity::PerGroup(g) = self.granularity {
            if g == 0 || !cols.is_multiple_of(g) {
                return shape_err(format!("group size {g} does not divide {cols} columns"));
            }
        }
        Ok(())
    }

    /// Shape of the scale / zero arrays for a `rows × cols` tensor.
    pub fn param_shape(&self, rows: usize, cols: usize) -> (usize, usize) {
        match self.granularity {
            Granularity::PerTensor => (1, 1),
            Granularity::PerChannel => (rows, 1),
            Granularity::PerGroup(g) => (rows, cols / g),
        }
    }

    pub(crate) fn blocks(&self, rows: usize, cols: usize) -> BlockMap {
        let (pr, pc) = self.param_shape(rows, cols);
        BlockMap {
            granularity: self.granularity,
            param_cols: pc,
            n_blocks: pr * pc,
        }
    }
}

/// Maps an element position to the index of its scale / zero entry.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockMap {
    granularity: Granularity,
    param_cols: usize,
    pub n_blocks: usize,
}

impl BlockMap {
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => i,
            Granularity::PerGroup(g) => i * self.param_cols + j / g,
        }
    }
}

/// Fitted scale `s` and integer zero offset `z`, one entry per block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub scale: Matrix,
    pub zero: Vec<i32>,
}

impl QuantParams {
    pub fn symmetric(scale: Matrix) -> Self {
        let n = scale.len();
        Self {
            scale,
            zero: vec![0; n],
        }
    }

    pub fn check(&self, spec: &QuantSpec, rows: usize, cols: usize) -> Result<()> {
        spec.check_shape(rows, cols)?;
        if self.scale.shape() != spec.param_shape(rows, cols) {
            return shape_err(format!(
                "scale is {:?}, expected {:?} for a {rows}x{cols} tensor",
                self.scale.shape(),
                spec.param_shape(rows, cols)
            ));
        }
        if self.zero.len() != self.scale.len() {
            return shape_err("zero offsets and scales differ in length");
        }
        Ok(())
    }

    /// Broadcast the per-block scales to a full `rows × cols` matrix.
    pub fn broadcast_scale(&self, spec: &QuantSpec, rows: usize, cols: usize) -> Matrix {
        let map = spec.blocks(rows, cols);
        Matrix::from_fn(rows, cols, |i, j| self.scale.data()[map.index(i, j)])
    }
}

/// Integer matrix of quantization codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.data[i * self.cols + j]
    }
}

/// Output of [`fake_quant`].
#[derive(Debug, Clone)]
pub struct FakeQuant {
    pub values: Matrix,
    pub codes: IntMatrix,
    /// 1 where the pre-clip code was inside the representable range.
    pub mask: Matrix,
}

/// `(clip(round(x / s) + z), inside_range)`.
#[inline]
pub(crate) fn quantize_code(x: f64, s: f64, z: i32, qmin: i32, qmax: i32) -> (i32, bool) {
    let t = round_half_even(x / s) + z as f64;
    let inside = t >= qmin as f64 && t <= qmax as f64;
    (t.clamp(qmin as f64, qmax as f64) as i32, inside)
}

#[inline]
pub fn dequantize_code(s: f64, code: i32, z: i32) -> f64 {
    s * (code - z) as f64
}

pub fn fake_quant(x: &Matrix, spec: &QuantSpec, params: &QuantParams) -> Result<FakeQuant> {
    let (rows, cols) = x.shape();
    params.check(spec, rows, cols)?;
    let map = spec.blocks(rows, cols);
    let (qmin, qmax) = (spec.qmin(), spec.qmax());
    let s = params.scale.data();
    let mut values = Matrix::zeros(rows, cols);
    let mut mask = Matrix::zeros(rows, cols);
    let mut codes = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let b = map.index(i, j);
            let (code, inside) = quantize_code(x.get(i, j), s[b], params.zero[b], qmin, qmax);
            codes.push(code);
            values.set(i, j, dequantize_code(s[b], code, params.zero[b]));
            if inside {
                mask.set(i, j, 1.0);
            }
        }
    }
    Ok(FakeQuant {
        values,
        codes: IntMatrix { rows, cols, data: codes },
        mask,
    })
}

/// Scale and zero offset for the real range `[lo, hi]`.
fn params_for_range(lo: f64, hi: f64, spec: &QuantSpec) -> (f64, i32) {
    if spec.symmetric {
        let maxabs = lo.abs().max(hi.abs());
        ((maxabs / spec.qmax() as f64).max(SCALE_FLOOR), 0)
    } else {
        if lo == 0.0 && hi == 0.0 {
            return (SCALE_FLOOR, 0);
        }
        let levels = ((1u32 << spec.bits) - 1) as f64;
        let s = ((hi - lo) / levels).max(SCALE_FLOOR);
        let z = round_half_even(spec.qmin() as f64 - lo / s);
        (s, z.clamp(spec.qmin() as f64, spec.qmax() as f64) as i32)
    }
}

/// Elements of `w` grouped by quantization block, in row-major order.
fn gather_blocks(w: &Matrix, spec: &QuantSpec) -> Vec<Vec<f64>> {
    let (rows, cols) = w.shape();
    let map = spec.blocks(rows, cols);
    let mut blocks = vec![Vec::new(); map.n_blocks];
    for i in 0..rows {
        for j in 0..cols {
            blocks[map.index(i, j)].push(w.get(i, j));
        }
    }
    blocks
}

fn block_range(block: &[f64]) -> (f64, f64) {
    block
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

fn assemble(spec: &QuantSpec, rows: usize, cols: usize, fitted: Vec<(f64, i32)>) -> QuantParams {
    let (pr, pc) = spec.param_shape(rows, cols);
    let (scale, zero): (Vec<f64>, Vec<i32>) = fitted.into_iter().unzip();
    QuantParams {
        scale: Matrix::from_vec(pr, pc, scale).expect("one parameter per block"),
        zero,
    }
}

/// Min-max range estimation.
pub fn estimate_minmax(w: &Matrix, spec: &QuantSpec) -> Result<QuantParams> {
    let (rows, cols) = w.shape();
    if w.is_empty() {
        return shape_err("cannot estimate ranges of an empty tensor");
    }
    spec.check_shape(rows, cols)?;
    let fitted = gather_blocks(w, spec)
        .iter()
        .map(|b| {
            let (lo, hi) = block_range(b);
            params_for_range(lo, hi, spec)
        })
        .collect();
    Ok(assemble(spec, rows, cols, fitted))
}

/// How quantization ranges are chosen before RTN or QAT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", deny_unknown_fields)]
pub enum RangeEstimator {
    MinMax,
    Lp {
        p: f64,
        #[serde(default = "default_candidates")]
        candidate_count: usize,
    },
}

fn default_candidates() -> usize {
    DEFAULT_LP_CANDIDATES
}

impl RangeEstimator {
    pub fn lp(p: f64) -> Self {
        RangeEstimator::Lp {
            p,
            candidate_count: DEFAULT_LP_CANDIDATES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let RangeEstimator::Lp { p, candidate_count } = *self {
            if !LP_GRID.contains(&p) {
                return Err(Error::Config(format!("p = {p} is not in {LP_GRID:?}")));
            }
            if candidate_count == 0 {
                return Err(Error::Config("candidate_count must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Min-max followed by every `p` in [`LP_GRID`].
    pub fn sweep() -> Vec<RangeEstimator> {
        std::iter::once(RangeEstimator::MinMax)
            .chain(LP_GRID.iter().map(|&p| RangeEstimator::lp(p)))
            .collect()
    }

    pub fn label(&self) -> String {
        match self {
            RangeEstimator::MinMax => "min-max".to_string(),
            RangeEstimator::Lp { p, .. } => format!("L{p}"),
        }
    }

    pub fn estimate(&self, w: &Matrix, spec: &QuantSpec) -> Result<QuantParams> {
        self.validate()?;
        match *self {
            RangeEstimator::MinMax => estimate_minmax(w, spec),
            RangeEstimator::Lp { p, candidate_count } => estimate_lp(w, spec, p, candidate_count),
        }
    }
}

/// Lᵖ range search: per block, shrink the min-max range by `i / n` for
/// `i = 1..=n` and keep the candidate with the smallest `Σ|ŵ − w|ᵖ`. Ties keep
/// the smaller range.
pub fn estimate_lp(w: &Matrix, spec: &QuantSpec, p: f64, candidates: usize) -> Result<QuantParams> {
    let (rows, cols) = w.shape();
    if w.is_empty() {
        return shape_err("cannot estimate ranges of an empty tensor");
    }
    if candidates == 0 || (p.is_nan() || p <= 0.0) {
        return Err(Error::Config(format!(
            "Lp search needs p > 0 and at least one candidate (p={p}, n={candidates})"
        )));
    }
    spec.check_shape(rows, cols)?;
    let (qmin, qmax) = (spec.qmin(), spec.qmax());
    let fitted = gather_blocks(w, spec)
        .iter()
        .map(|block| {
            let (lo, hi) = block_range(block);
            let mut best = (f64::INFINITY, params_for_range(lo, hi, spec));
            for i in 1..=candidates {
                let c = i as f64 / candidates as f64;
                let (s, z) = params_for_range(c * lo, c * hi, spec);
                let err: f64 = block
                    .iter()
                    .map(|&x| {
                        let (code, _) = quantize_code(x, s, z, qmin, qmax);
                        (dequantize_code(s, code, z) - x).abs().powf(p)
                    })
                    .sum();
                if err < best.0 {
                    best = (err, (s, z));
                }
            }
            best.1
        })
        .collect();
    Ok(assemble(spec, rows, cols, fitted))
}

/// `Σ |fake_quant(w) − w|ᵖ`.
pub fn quant_error(w: &Matrix, params: &QuantParams, spec: &QuantSpec, p: f64) -> Result<f64> {
    if p.is_nan() || p <= 0.0 {
        return Err(Error::Config(format!("p must be positive, got {p}")));
    }
    let fq = fake_quant(w, spec, params)?;
    Ok(fq
        .values
        .data()
        .iter()
        .zip(w.data())
        .map(|(q, x)| (q - x).abs().powf(p))
        .sum())
}

/// Per-row (token) symmetric scale `maxabs / (2^(b−1) − 1)`.
pub fn per_token_scales(x: &Matrix, bits: u8) -> Vec<f64> {
    let qmax = ((1 << (bits - 1)) - 1) as f64;
    (0..x.rows())
        .map(|i| {
            let m = x.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (m / qmax).max(SCALE_FLOOR)
        })
        .collect()
}

/// Dynamic symmetric per-token quantization of activations (rows = tokens).
/// Scales are recomputed on every call and are not trained.
pub fn quantize_activations_per_token(x: &Matrix, bits: u8) -> Result<(Matrix, Matrix)> {
    let spec = QuantSpec::new(bits, true, Granularity::PerChannel)?;
    let scales = per_token_scales(x, bits);
    let params = QuantParams::symmetric(Matrix::from_vec(x.rows(), 1, scales)?);
    let fq = fake_quant(x, &spec, &params)?;
    Ok((fq.values, fq.mask))
}
