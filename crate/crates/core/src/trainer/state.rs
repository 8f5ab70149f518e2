//! Mapping between [`Model`] and the tensor container.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, DType, Tensor};
use crate::downcast::{DowncastFormat, DowncastTensor};
use crate::error::{Error, Result};
use crate::lrqat::{FusedLayer, LrQatLayer, LsqLayer};
use crate::nanollm::{ActQuant, Linear, Model, ModelConfig};
use crate::numcore::Matrix;
use crate::quantsim::{QuantParams, QuantSpec};

const META: &str = "meta.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LinearMeta {
    Fp,
    Lsq { spec: QuantSpec },
    Lrqat { spec: QuantSpec, alpha: f64, format: DowncastFormat },
    Fused { spec: QuantSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    act: ActQuant,
    frozen_base: bool,
    train_scale: bool,
    linears: BTreeMap<String, LinearMeta>,
}

fn zero_tensor(name: String, zero: &[i32]) -> Tensor {
    let z: Vec<i8> = zero.iter().map(|&z| z as i8).collect();
    Tensor::from_i8(name, &z)
}

fn phi0_dtype(format: DowncastFormat) -> DType {
    match format {
        DowncastFormat::Fp32 => DType::F32,
        DowncastFormat::Bf16 => DType::Bf16,
        DowncastFormat::FixedPoint(_) => DType::I8,
        DowncastFormat::IntPacked(_) => DType::PackedNibbles,
    }
}

fn dims(rows: usize, cols: usize) -> Vec<u32> {
    vec![rows as u32, cols as u32]
}

pub fn model_to_checkpoint(model: &Model) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::default();
    let mut linears = BTreeMap::new();
    let mut body = Vec::new();
    body.push(Tensor::from_matrix("tok_emb", &model.tok_emb));
    body.push(Tensor::from_matrix("pos_emb", &model.pos_emb));
    for (i, b) in model.blocks.iter().enumerate() {
        body.push(Tensor::from_matrix(format!("blocks.{i}.norm1"), &b.norm1));
        body.push(Tensor::from_matrix(format!("blocks.{i}.norm2"), &b.norm2));
    }
    body.push(Tensor::from_matrix("norm_f", &model.norm_f));
    body.push(Tensor::from_matrix("head", &model.head));
    for (name, lin) in model.linears() {
        let meta = match lin {
            Linear::Fp(w) => {
                body.push(Tensor::from_matrix(format!("{name}.w"), w));
                LinearMeta::Fp
            }
            Linear::Lsq(l) => {
                body.push(Tensor::from_matrix(format!("{name}.w"), &l.w));
                body.push(Tensor::from_matrix(format!("{name}.s"), &l.scale));
                body.push(zero_tensor(format!("{name}.zero"), l.zero()));
                LinearMeta::Lsq { spec: *l.spec() }
            }
            Linear::LrQat(l) => {
                let phi = l.phi0();
                let (m, k) = phi.shape();
                let tensor_dims = match phi.format() {
                    DowncastFormat::IntPacked(_) => vec![(m * k) as u32],
                    _ => dims(m, k),
                };
                body.push(Tensor::from_bytes(
                    format!("{name}.phi0"),
                    phi0_dtype(phi.format()),
                    tensor_dims,
                    phi.payload().to_vec(),
                )?);
                body.push(Tensor::from_matrix(format!("{name}.A"), &l.a));
                body.push(Tensor::from_matrix(format!("{name}.B"), &l.b));
                body.push(Tensor::from_matrix(format!("{name}.s"), &l.scale));
                body.push(Tensor::from_matrix(format!("{name}.s0"), l.initial_scale()));
                body.push(zero_tensor(format!("{name}.zero"), l.zero()));
                LinearMeta::Lrqat {
                    spec: *l.spec(),
                    alpha: l.alpha(),
                    format: phi.format(),
                }
            }
            Linear::Fused(l) => {
                let (m, k) = l.shape();
                let (dtype, tensor_dims) = if l.is_packed() {
                    (DType::PackedNibbles, vec![(m * k) as u32])
                } else {
                    (DType::I8, dims(m, k))
                };
                body.push(Tensor::from_bytes(
                    format!("{name}.codes"),
                    dtype,
                    tensor_dims,
                    l.payload().to_vec(),
                )?);
                body.push(Tensor::from_matrix(format!("{name}.s"), l.scale()));
                body.push(zero_tensor(format!("{name}.zero"), l.zero()));
                LinearMeta::Fused { spec: *l.spec() }
            }
        };
        linears.insert(name, meta);
    }
    let meta = ModelMeta {
        config: model.config,
        act: model.act,
        frozen_base: model.frozen_base,
        train_scale: model.train_scale,
        linears,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Input(e.to_string()))?;
    let json: Vec<i8> = json.into_iter().map(|b| b as i8).collect();
    ckpt.push(Tensor::from_i8(META, &json));
    ckpt.tensors.extend(body);
    Ok(ckpt)
}

fn matrix(ckpt: &Checkpoint, name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let m = ckpt.get(name)?.to_matrix()?;
    if m.shape() != shape {
        return Err(Error::Shape(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            m.shape()
        )));
    }
    Ok(m)
}

fn zero(ckpt: &Checkpoint, name: &str) -> Result<Vec<i32>> {
    Ok(ckpt.get(name)?.to_i8()?.into_iter().map(i32::from).collect())
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let raw: Vec<u8> = ckpt.get(META)?.to_i8()?.into_iter().map(|b| b as u8).collect();
    let meta: ModelMeta = serde_json::from_slice(&raw)
        .map_err(|e| Error::Input(format!("checkpoint metadata: {e}")))?;
    let config = meta.config;
    config.validate()?;
    let d = config.d_model;
    let mut model = Model::new(config, &mut crate::numcore::Rng::new(0))?;
    model.act = meta.act;
    model.frozen_base = meta.frozen_base;
    model.train_scale = meta.train_scale;
    model.tok_emb = matrix(ckpt, "tok_emb", (crate::nanollm::VOCAB, d))?;
    model.pos_emb = matrix(ckpt, "pos_emb", (config.max_seq_len, d))?;
    model.norm_f = matrix(ckpt, "norm_f", (1, d))?;
    model.head = matrix(ckpt, "head", (crate::nanollm::VOCAB, d))?;
    for (i, b) in model.blocks.iter_mut().enumerate() {
        b.norm1 = matrix(ckpt, &format!("blocks.{i}.norm1"), (1, d))?;
        b.norm2 = matrix(ckpt, &format!("blocks.{i}.norm2"), (1, d))?;
    }
    let shapes: BTreeMap<String, (usize, usize)> = config
        .linear_shapes()
        .into_iter()
        .map(|(n, m, k)| (n, (m, k)))
        .collect();
    model.convert_linears(|name, _| {
        let (m, k) = shapes[name];
        let meta = meta
            .linears
            .get(name)
            .ok_or_else(|| Error::Input(format!("no metadata for {name}")))?;
        let t = |suffix: &str| format!("{name}.{suffix}");
        Ok(match meta {
            LinearMeta::Fp => Linear::Fp(matrix(ckpt, &t("w"), (m, k))?),
            LinearMeta::Lsq { spec } => {
                let ps = spec.param_shape(m, k);
                let params = QuantParams {
                    scale: matrix(ckpt, &t("s"), ps)?,
                    zero: zero(ckpt, &t("zero"))?,
                };
                Linear::Lsq(LsqLayer::new(matrix(ckpt, &t("w"), (m, k))?, params, *spec)?)
            }
            LinearMeta::Lrqat { spec, alpha, format } => {
                let ps = spec.param_shape(m, k);
                let phi = ckpt.get(&t("phi0"))?;
                if phi.dtype != phi0_dtype(*format) || phi.numel() != m * k {
                    return Err(Error::Input(format!("{name}.phi0 does not match its format")));
                }
                let phi0 = DowncastTensor::from_parts(*format, m, k, phi.payload.clone())?;
                let a = ckpt.get(&t("A"))?.to_matrix()?;
                let b = ckpt.get(&t("B"))?.to_matrix()?;
                Linear::LrQat(LrQatLayer::from_parts(
                    phi0,
                    a,
                    b,
                    matrix(ckpt, &t("s"), ps)?,
                    matrix(ckpt, &t("s0"), ps)?,
                    zero(ckpt, &t("zero"))?,
                    *spec,
                    *alpha,
                )?)
            }
            LinearMeta::Fused { spec } => {
                let codes = ckpt.get(&t("codes"))?;
                if codes.numel() != m * k {
                    return Err(Error::Input(format!("{name}.codes has the wrong size")));
                }
                Linear::Fused(FusedLayer::from_payload(
                    m,
                    k,
                    codes.payload.clone(),
                    matrix(ckpt, &t("s"), spec.param_shape(m, k))?,
                    zero(ckpt, &t("zero"))?,
                    *spec,
                )?)
            }
        })
    })?;
    Ok(model)
}

pub fn save_model(model: &Model, path: &std::path::Path) -> Result<()> {
    super::checkpoint::save_checkpoint(&model_to_checkpoint(model)?, path)
}

pub fn load_model(path: &std::path::Path) -> Result<Model> {
    model_from_checkpoint(&super::checkpoint::load_checkpoint(path)?)
}
