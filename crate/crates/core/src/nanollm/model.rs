use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::linear::Linear;
use super::loss::nll_sum;
use crate::error::{shape_err, Error, Result};
use crate::numcore::{matmul, matmul_nt, matmul_tn, randn, Matrix, Rng};
use crate::quantsim::quantize_activations_per_token;

/// Byte-level vocabulary.
pub const VOCAB: usize = 256;

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Two blocks, width 64, four heads, FFN 256, context 128.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(name, out, in)` for every mode-controlled linear layer.
    pub fn linear_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, f) = (self.d_model, self.d_ff);
        (0..self.n_layers)
            .flat_map(|i| {
                [
                    ("attn.wq", d, d),
                    ("attn.wk", d, d),
                    ("attn.wv", d, d),
                    ("attn.wo", d, d),
                    ("ffn.w1", f, d),
                    ("ffn.w2", d, f),
                ]
                .map(|(n, m, k)| (format!("blocks.{i}.{n}"), m, k))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Fp,
    Lsq,
    Lrqat,
    Fused,
}

/// Dynamic per-token quantization of matmul inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActQuant {
    /// Inputs of every mode-controlled linear and the query side of `Q·Kᵀ`.
    pub act_bits: Option<u8>,
    /// Keys and values before the attention matmuls.
    pub kv_bits: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: Matrix,
    pub norm2: Matrix,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub w1: Linear,
    pub w2: Linear,
}

const LINEAR_NAMES: [&str; 6] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"];

impl Block {
    pub fn linears(&self) -> [(&'static str, &Linear); 6] {
        let l = [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2];
        std::array::from_fn(|i| (LINEAR_NAMES[i], l[i]))
    }

    pub fn linears_mut(&mut self) -> [(&'static str, &mut Linear); 6] {
        let [a, b, c, d, e, f] = [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
        ];
        [
            (LINEAR_NAMES[0], a),
            (LINEAR_NAMES[1], b),
            (LINEAR_NAMES[2], c),
            (LINEAR_NAMES[3], d),
            (LINEAR_NAMES[4], e),
            (LINEAR_NAMES[5], f),
        ]
    }
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Matrix>;

/// Pre-norm causal transformer over bytes.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub norm_f: Matrix,
    pub head: Matrix,
    pub act: ActQuant,
    /// Embeddings, norms and the output head receive no gradients.
    pub frozen_base: bool,
    /// Whether quantization scales are trained (otherwise held at `s₀`).
    pub train_scale: bool,
}

struct BlockCache {
    inv_rms1: Vec<f64>,
    n1: Matrix,
    h1_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    att_in: Matrix,
    inv_rms2: Vec<f64>,
    n2: Matrix,
    h2_in: Matrix,
    f_pre: Matrix,
    f_in: Matrix,
}

/// Activations kept for [`Model::backward`].
pub struct ForwardCache {
    batch: usize,
    len: usize,
    inputs: Vec<u8>,
    blocks: Vec<BlockCache>,
    inv_rms_f: Vec<f64>,
    n_f: Matrix,
    h_f: Matrix,
}

impl ForwardCache {
    /// Softmax probabilities of block `layer`, one `L × L` matrix per
    /// (sequence, head) in that order.
    pub fn attention_probs(&self, layer: usize) -> &[Matrix] {
        &self.blocks[layer].probs
    }

    /// Query and key matrices exactly as they entered `Q·Kᵀ`.
    pub fn attention_qk(&self, layer: usize) -> (&Matrix, &Matrix) {
        (&self.blocks[layer].q, &self.blocks[layer].k)
    }
}

fn rms_norm(x: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut n = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = n.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= r);
        inv.push(r);
    }
    (n, inv)
}

/// Input gradient of `n = x · r(x)` given `dn`.
fn rms_norm_backward(n: &Matrix, inv: &[f64], dn: &Matrix) -> Matrix {
    let d = n.cols() as f64;
    let mut dx = Matrix::zeros(n.rows(), n.cols());
    for (i, &r) in inv.iter().enumerate() {
        let (nr, dnr) = (n.row(i), dn.row(i));
        let proj = nr.iter().zip(dnr).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(nr).zip(dnr) {
            *o = r * (b - a * proj);
        }
    }
    dx
}

fn scale_cols(x: &Matrix, gain: &Matrix) -> Matrix {
    let g = gain.data();
    let mut out = x.clone();
    for i in 0..out.rows() {
        out.row_mut(i).iter_mut().zip(g).for_each(|(v, &gj)| *v *= gj);
    }
    out
}

/// `(Σ_rows dy ∘ n, dy ∘ gain)`
fn gain_backward(dy: &Matrix, n: &Matrix, gain: &Matrix) -> (Matrix, Matrix) {
    let mut dg = Matrix::zeros(1, gain.cols());
    for i in 0..dy.rows() {
        for ((acc, &a), &b) in dg.data_mut().iter_mut().zip(dy.row(i)).zip(n.row(i)) {
            *acc += a * b;
        }
    }
    (dg, scale_cols(dy, gain))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn maybe_quant(x: Matrix, bits: Option<u8>) -> Result<Matrix> {
    match bits {
        Some(b) => Ok(quantize_activations_per_token(&x, b)?.0),
        None => Ok(x),
    }
}

fn slice_block(x: &Matrix, row0: usize, rows: usize, col0: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| x.get(row0 + i, col0 + j))
}

fn write_block(dst: &mut Matrix, src: &Matrix, row0: usize, col0: usize) {
    for i in 0..src.rows() {
        let w = dst.cols();
        dst.data_mut()[(row0 + i) * w + col0..(row0 + i) * w + col0 + src.cols()]
            .copy_from_slice(src.row(i));
    }
}

fn add_block(dst: &mut Matrix, src: &Matrix, row0: usize, col0: usize) {
    for i in 0..src.rows() {
        let w = dst.cols();
        dst.data_mut()[(row0 + i) * w + col0..(row0 + i) * w + col0 + src.cols()]
            .iter_mut()
            .zip(src.row(i))
            .for_each(|(a, b)| *a += b);
    }
}

impl Model {
    /// Randomly initialized full-precision model: `N(0, 0.02²)` weights, the
    /// residual output projections scaled by `1/√(2·n_layers)`, unit norms.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let std = 0.02;
        let resid = std / (2.0 * config.n_layers as f64).sqrt();
        let mut w = |m: usize, k: usize, s: f64| randn(rng, m, k).scale(s);
        let tok_emb = w(VOCAB, d, std);
        let pos_emb = w(config.max_seq_len, d, std);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                norm1: Matrix::filled(1, d, 1.0),
                norm2: Matrix::filled(1, d, 1.0),
                wq: Linear::Fp(w(d, d, std)),
                wk: Linear::Fp(w(d, d, std)),
                wv: Linear::Fp(w(d, d, std)),
                wo: Linear::Fp(w(d, d, resid)),
                w1: Linear::Fp(w(f, d, std)),
                w2: Linear::Fp(w(d, f, resid)),
            })
            .collect();
        let head = w(VOCAB, d, std);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            norm_f: Matrix::filled(1, d, 1.0),
            head,
            act: ActQuant::default(),
            frozen_base: false,
            train_scale: true,
        })
    }

    pub fn layer_mode(&self) -> LayerMode {
        match self.blocks.first().map(|b| &b.wq) {
            Some(Linear::Lsq(_)) => LayerMode::Lsq,
            Some(Linear::LrQat(_)) => LayerMode::Lrqat,
            Some(Linear::Fused(_)) => LayerMode::Fused,
            _ => LayerMode::Fp,
        }
    }

    /// Every mode-controlled linear with its full name.
    pub fn linears(&self) -> Vec<(String, &Linear)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.linears()
                    .map(|(n, l)| (format!("blocks.{i}.{n}"), l))
            })
            .collect()
    }

    pub fn linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| {
                b.linears_mut()
                    .map(|(n, l)| (format!("blocks.{i}.{n}"), l))
            })
            .collect()
    }

    /// Replaces every linear with `f(name, old)`.
    pub fn convert_linears(
        &mut self,
        mut f: impl FnMut(&str, &Linear) -> Result<Linear>,
    ) -> Result<()> {
        for (name, lin) in self.linears_mut() {
            let new = f(&name, lin)?;
            if new.shape() != lin.shape() {
                return shape_err(format!("replacement for {name} changes its shape"));
            }
            *lin = new;
        }
        Ok(())
    }

    fn linear_trainable(&self, lin: &Linear) -> bool {
        match lin {
            Linear::Fp(_) => !self.frozen_base,
            Linear::Lsq(_) | Linear::LrQat(_) => true,
            Linear::Fused(_) => false,
        }
    }

    /// Names of all parameters that receive gradients, sorted.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if !self.frozen_base {
            names.extend(["tok_emb", "pos_emb", "norm_f", "head"].map(String::from));
            for i in 0..self.blocks.len() {
                names.push(format!("blocks.{i}.norm1"));
                names.push(format!("blocks.{i}.norm2"));
            }
        }
        for (name, lin) in self.linears() {
            if self.linear_trainable(lin) {
                for s in lin.trainable_suffixes(self.train_scale) {
                    names.push(format!("{name}.{s}"));
                }
            }
        }
        names.sort();
        names
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        match name {
            "tok_emb" => return Some(&mut self.tok_emb),
            "pos_emb" => return Some(&mut self.pos_emb),
            "norm_f" => return Some(&mut self.norm_f),
            "head" => return Some(&mut self.head),
            _ => {}
        }
        let rest = name.strip_prefix("blocks.")?;
        let (idx, rest) = rest.split_once('.')?;
        let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        match rest {
            "norm1" => return Some(&mut block.norm1),
            "norm2" => return Some(&mut block.norm2),
            _ => {}
        }
        let (lin, suffix) = rest.rsplit_once('.')?;
        let pos = LINEAR_NAMES.iter().position(|&n| n == lin)?;
        let (_, l) = block.linears_mut().into_iter().nth(pos)?;
        l.param_mut(suffix)
    }

    /// Total number of scalars in the trainable parameters.
    pub fn trainable_count(&mut self) -> usize {
        self.trainable_names()
            .iter()
            .map(|n| self.param_mut(n).map_or(0, |m| m.len()))
            .sum()
    }

    /// Logits `[batch·len × 256]` for flat `inputs` of `batch` rows.
    pub fn forward(&self, inputs: &[u8], batch: usize) -> Result<(Matrix, ForwardCache)> {
        let len = inputs.len() / batch.max(1);
        if batch == 0 || len * batch != inputs.len() || len == 0 {
            return shape_err(format!("{} tokens cannot form {batch} rows", inputs.len()));
        }
        if len > self.config.max_seq_len {
            return shape_err(format!(
                "sequence length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            ));
        }
        let d = self.config.d_model;
        let mut x = Matrix::zeros(batch * len, d);
        for (r, &tok) in inputs.iter().enumerate() {
            let pos = r % len;
            for ((o, &a), &b) in x
                .row_mut(r)
                .iter_mut()
                .zip(self.tok_emb.row(tok as usize))
                .zip(self.pos_emb.row(pos))
            {
                *o = a + b;
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = self.block_forward(block, x, batch, len)?;
            caches.push(cache);
            x = out;
        }
        let (n_f, inv_rms_f) = rms_norm(&x);
        let h_f = scale_cols(&n_f, &self.norm_f);
        let logits = matmul_nt(&h_f, &self.head)?;
        Ok((
            logits,
            ForwardCache {
                batch,
                len,
                inputs: inputs.to_vec(),
                blocks: caches,
                inv_rms_f,
                n_f,
                h_f,
            },
        ))
    }

    pub fn logits(&self, inputs: &[u8], batch: usize) -> Result<Matrix> {
        Ok(self.forward(inputs, batch)?.0)
    }

    fn block_forward(
        &self,
        block: &Block,
        x_in: Matrix,
        batch: usize,
        len: usize,
    ) -> Result<(Matrix, BlockCache)> {
        let act = self.act.act_bits;
        let kv = self.act.kv_bits;
        let (n1, inv_rms1) = rms_norm(&x_in);
        let h1_in = maybe_quant(scale_cols(&n1, &block.norm1), act)?;
        let q = maybe_quant(block.wq.forward(&h1_in)?, act)?;
        let k = maybe_quant(block.wk.forward(&h1_in)?, kv)?;
        let v = maybe_quant(block.wv.forward(&h1_in)?, kv)?;

        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut att = Matrix::zeros(batch * len, self.config.d_model);
        let mut probs = Vec::with_capacity(batch * h);
        for b in 0..batch {
            for hd in 0..h {
                let qs = slice_block(&q, b * len, len, hd * dh, dh);
                let ks = slice_block(&k, b * len, len, hd * dh, dh);
                let vs = slice_block(&v, b * len, len, hd * dh, dh);
                let mut p = matmul_nt(&qs, &ks)?;
                for i in 0..len {
                    let row = p.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for s in row[..=i].iter_mut() {
                        *s *= scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in row[..=i].iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    row[..=i].iter_mut().for_each(|s| *s /= sum);
                    row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
                }
                write_block(&mut att, &matmul(&p, &vs)?, b * len, hd * dh);
                probs.push(p);
            }
        }
        let att_in = maybe_quant(att, act)?;
        let mut x_mid = x_in;
        x_mid.axpy(1.0, &block.wo.forward(&att_in)?)?;

        let (n2, inv_rms2) = rms_norm(&x_mid);
        let h2_in = maybe_quant(scale_cols(&n2, &block.norm2), act)?;
        let f_pre = block.w1.forward(&h2_in)?;
        let f_in = maybe_quant(f_pre.map(gelu), act)?;
        let mut x_out = x_mid;
        x_out.axpy(1.0, &block.w2.forward(&f_in)?)?;
        Ok((
            x_out,
            BlockCache {
                inv_rms1,
                n1,
                h1_in,
                q,
                k,
                v,
                probs,
                att_in,
                inv_rms2,
                n2,
                h2_in,
                f_pre,
                f_in,
            },
        ))
    }

    /// Gradients of every trainable parameter given `∂L/∂logits`.
    /// Per-token activation quantizers are passed straight through.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Grads> {
        let rows = cache.batch * cache.len;
        if dlogits.shape() != (rows, VOCAB) {
            return shape_err(format!("dlogits {:?}, expected ({rows}, {VOCAB})", dlogits.shape()));
        }
        let mut grads = Grads::new();
        let train_base = !self.frozen_base;
        let dh_f = matmul(dlogits, &self.head)?;
        if train_base {
            grads.insert("head".into(), matmul_tn(dlogits, &cache.h_f)?);
        }
        let (dg, dn) = gain_backward(&dh_f, &cache.n_f, &self.norm_f);
        if train_base {
            grads.insert("norm_f".into(), dg);
        }
        let mut dx = rms_norm_backward(&cache.n_f, &cache.inv_rms_f, &dn);

        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            dx = self.block_backward(i, block, bc, dx, cache.batch, cache.len, &mut grads)?;
        }

        if train_base {
            let d = self.config.d_model;
            let mut dtok = Matrix::zeros(VOCAB, d);
            let mut dpos = Matrix::zeros(self.config.max_seq_len, d);
            for (r, &tok) in cache.inputs.iter().enumerate() {
                let g = dx.row(r);
                dtok.row_mut(tok as usize)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
                dpos.row_mut(r % cache.len)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            grads.insert("tok_emb".into(), dtok);
            grads.insert("pos_emb".into(), dpos);
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        index: usize,
        block: &Block,
        bc: &BlockCache,
        dx_out: Matrix,
        batch: usize,
        len: usize,
        grads: &mut Grads,
    ) -> Result<Matrix> {
        let prefix = format!("blocks.{index}");
        let mut record = |lin: &str, params: Vec<(&'static str, Matrix)>| {
            for (s, g) in params {
                grads.insert(format!("{prefix}.{lin}.{s}"), g);
            }
        };
        let train_base = !self.frozen_base;
        let ts = self.train_scale;

        // FFN
        let lb = block.w2.backward(&bc.f_in, &dx_out, self.linear_trainable(&block.w2), ts)?;
        record("ffn.w2", lb.params);
        let mut df_pre = lb.dx;
        for (g, &x) in df_pre.data_mut().iter_mut().zip(bc.f_pre.data()) {
            *g *= gelu_grad(x);
        }
        let lb = block.w1.backward(&bc.h2_in, &df_pre, self.linear_trainable(&block.w1), ts)?;
        record("ffn.w1", lb.params);
        let (dg2, dn2) = gain_backward(&lb.dx, &bc.n2, &block.norm2);
        let mut dx_mid = dx_out;
        dx_mid.axpy(1.0, &rms_norm_backward(&bc.n2, &bc.inv_rms2, &dn2))?;

        // Attention
        let lb = block.wo.backward(&bc.att_in, &dx_mid, self.linear_trainable(&block.wo), ts)?;
        record("attn.wo", lb.params);
        let datt = lb.dx;
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let d = self.config.d_model;
        let mut dq = Matrix::zeros(batch * len, d);
        let mut dk = Matrix::zeros(batch * len, d);
        let mut dv = Matrix::zeros(batch * len, d);
        for b in 0..batch {
            for hd in 0..h {
                let p = &bc.probs[b * h + hd];
                let qs = slice_block(&bc.q, b * len, len, hd * dh, dh);
                let ks = slice_block(&bc.k, b * len, len, hd * dh, dh);
                let vs = slice_block(&bc.v, b * len, len, hd * dh, dh);
                let dout = slice_block(&datt, b * len, len, hd * dh, dh);
                let dp = matmul_nt(&dout, &vs)?;
                write_block(&mut dv, &matmul_tn(p, &dout)?, b * len, hd * dh);
                let mut ds = Matrix::zeros(len, len);
                for i in 0..len {
                    let (pr, dpr) = (&p.row(i)[..=i], &dp.row(i)[..=i]);
                    let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for (o, (&pv, &dpv)) in ds.row_mut(i)[..=i].iter_mut().zip(pr.iter().zip(dpr)) {
                        *o = pv * (dpv - inner) * scale;
                    }
                }
                add_block(&mut dq, &matmul(&ds, &ks)?, b * len, hd * dh);
                add_block(&mut dk, &matmul_tn(&ds, &qs)?, b * len, hd * dh);
            }
        }
        let mut dh1 = Matrix::zeros(batch * len, d);
        for (name, lin, dproj) in [
            ("attn.wq", &block.wq, &dq),
            ("attn.wk", &block.wk, &dk),
            ("attn.wv", &block.wv, &dv),
        ] {
            let lb = lin.backward(&bc.h1_in, dproj, self.linear_trainable(lin), ts)?;
            record(name, lb.params);
            dh1.axpy(1.0, &lb.dx)?;
        }
        let (dg1, dn1) = gain_backward(&dh1, &bc.n1, &block.norm1);
        let mut dx_in = dx_mid;
        dx_in.axpy(1.0, &rms_norm_backward(&bc.n1, &bc.inv_rms1, &dn1))?;
        if train_base {
            grads.insert(format!("{prefix}.norm1"), dg1);
            grads.insert(format!("{prefix}.norm2"), dg2);
        }
        Ok(dx_in)
    }
}

/// `exp(mean NLL)` over the validation windows in order. `max_windows`
/// restricts evaluation to a prefix of the validation region.
pub fn perplexity(
    model: &Model,
    corpus: &Corpus,
    batch_size: usize,
    max_windows: Option<usize>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in corpus.val_batches(batch_size, max_windows) {
        let logits = model.logits(&b.inputs(), b.batch)?;
        let targets = b.targets();
        total += nll_sum(&logits, &targets);
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::Input("validation region is empty".into()));
    }
    Ok((total / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nanollm::cross_entropy_and_grad;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_seq_len: 8,
        }
    }

    fn tokens(rng: &mut Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| rng.below(256) as u8).collect()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::toy().validate().is_ok());
        assert_eq!(ModelConfig::toy().linear_shapes().len(), 12);
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let mut rng = Rng::new(1);
        let model = Model::new(tiny(), &mut rng).unwrap();
        let inputs = tokens(&mut rng, 16);
        let targets = tokens(&mut rng, 16);
        let logits = model.logits(&inputs, 2).unwrap();
        let (nll, _) = cross_entropy_and_grad(&logits, &targets).unwrap();
        assert!((nll - 256f64.ln()).abs() < 0.5, "{nll}");
    }

    #[test]
    fn causal_mask_holds() {
        let mut rng = Rng::new(2);
        let model = Model::new(tiny(), &mut rng).unwrap();
        let mut inputs = tokens(&mut rng, 8);
        let before = model.logits(&inputs, 1).unwrap();
        inputs[5] = inputs[5].wrapping_add(17);
        let after = model.logits(&inputs, 1).unwrap();
        for t in 0..5 {
            assert_eq!(before.row(t), after.row(t));
        }
        assert_ne!(before.row(5), after.row(5));
    }

    #[test]
    fn full_model_gradient_check() {
        let mut rng = Rng::new(3);
        let mut model = Model::new(tiny(), &mut rng).unwrap();
        // Larger weights so every path carries signal.
        for name in model.trainable_names() {
            let p = model.param_mut(&name).unwrap();
            if !name.contains("norm") {
                let bump = randn(&mut rng, p.rows(), p.cols()).scale(0.2);
                p.axpy(1.0, &bump).unwrap();
            }
        }
        let inputs = tokens(&mut rng, 12);
        let targets = tokens(&mut rng, 12);
        let (logits, cache) = model.forward(&inputs, 2).unwrap();
        let (_, dlogits) = cross_entropy_and_grad(&logits, &targets).unwrap();
        let grads = model.backward(&cache, &dlogits).unwrap();
        assert_eq!(grads.keys().cloned().collect::<Vec<_>>(), model.trainable_names());

        for name in model.trainable_names() {
            let analytic = &grads[&name];
            assert!(analytic.is_finite());
            let base = model.param_mut(&name).unwrap().clone();
            let loss = |p: &Matrix| {
                let mut m = model.clone();
                *m.param_mut(&name).unwrap() = p.clone();
                let logits = m.logits(&inputs, 2).unwrap();
                cross_entropy_and_grad(&logits, &targets).unwrap().0
            };
            // Spot-check a handful of entries per tensor.
            let idx: Vec<usize> = (0..6).map(|_| rng.below(base.len() as u64) as usize).collect();
            for &n in &idx {
                let eps = 1e-5;
                let mut up = base.clone();
                up.data_mut()[n] += eps;
                let mut down = base.clone();
                down.data_mut()[n] -= eps;
                let numeric = (loss(&up) - loss(&down)) / (2.0 * eps);
                let a = analytic.data()[n];
                let err = (numeric - a).abs() / a.abs().max(1e-3);
                assert!(err < 1e-4, "{name}[{n}]: analytic {a}, numeric {numeric}");
            }
        }
    }
}
