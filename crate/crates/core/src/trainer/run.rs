use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::config::{AdapterInit, DowncastKind, TrainConfig};
use super::optim::{adamw_step, clip_global_norm, lr_at, AdamW, OptimState};
use crate::error::{Error, Result};
use crate::lrqat::{FusedLayer, LrQatLayer, LsqLayer};
use crate::nanollm::{
    cross_entropy_and_grad, perplexity, ActQuant, Corpus, LayerMode, Linear, Model,
};
use crate::numcore::Rng;
use crate::quantsim::{fake_quant, QuantParams, RangeEstimator, SCALE_FLOOR};

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const ADAPTER_STREAM: u64 = 3;
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetric {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: String,
    pub steps: usize,
    pub estimator: Option<String>,
    /// Round-to-nearest perplexity with the same ranges.
    pub rtn_ppl: Option<f64>,
    /// Perplexity before the first update.
    pub initial_ppl: f64,
    pub final_ppl: f64,
    /// Perplexity of the fused integer model, when one was produced.
    pub fused_ppl: Option<f64>,
    pub trainable_params: usize,
    pub metrics: Vec<StepMetric>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RtnRow {
    pub estimator: String,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RtnReport {
    pub rows: Vec<RtnRow>,
    pub best: RangeEstimator,
    pub best_label: String,
    pub best_ppl: f64,
}

/// A finished QAT run: the trained simulated model and its fused form.
pub struct QatOutcome {
    pub report: RunReport,
    pub simulated: Model,
    pub fused: Model,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub rank: usize,
    pub downcast: String,
    pub init: String,
    pub initial_ppl: f64,
    pub final_ppl: f64,
}

pub fn evaluate(model: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<f64> {
    perplexity(model, corpus, EVAL_BATCH, cfg.eval_windows)
}

fn check_corpus(corpus: &Corpus, cfg: &TrainConfig, model: &Model) -> Result<()> {
    if corpus.seq_len() != cfg.seq_len {
        return Err(Error::Config(format!(
            "corpus windows of {} tokens, config seq_len {}",
            corpus.seq_len(),
            cfg.seq_len
        )));
    }
    if cfg.seq_len > model.config.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Runs `cfg.steps` AdamW updates on every trainable tensor of `model`.
/// `hyper(name)` gives each tensor's peak learning rate and weight decay;
/// `lr_label` is the peak rate reported in the metrics.
fn train_loop(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    lr_label: f64,
    hyper: impl Fn(&str) -> (f64, f64),
) -> Result<Vec<StepMetric>> {
    let opt = AdamW {
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: cfg.adam_eps,
    };
    let mut states: BTreeMap<String, OptimState> = BTreeMap::new();
    let mut rng = Rng::new(cfg.seed).fork(BATCH_STREAM);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = corpus.sample_batch(&mut rng, cfg.batch_size);
        let (logits, cache) = model.forward(&batch.inputs(), batch.batch)?;
        let (loss, dlogits) = cross_entropy_and_grad(&logits, &batch.targets())?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        let mut grads = model.backward(&cache, &dlogits)?;
        drop(cache);
        clip_global_norm(&mut grads, cfg.grad_clip_norm);
        let factor = lr_at(step, cfg.steps, cfg.warmup_fraction, 1.0);
        for (name, g) in &grads {
            let (lr, wd) = hyper(name);
            if lr == 0.0 {
                continue;
            }
            let p = model
                .param_mut(name)
                .ok_or_else(|| Error::Input(format!("no parameter {name}")))?;
            let st = states
                .entry(name.clone())
                .or_insert_with(|| OptimState::zeros_like(p));
            adamw_step(p, g, st, lr * factor, opt, wd)?;
            if name.ends_with(".s") {
                p.data_mut().iter_mut().for_each(|s| *s = s.max(SCALE_FLOOR));
            }
        }
        let done = step + 1;
        let val_ppl = if done % cfg.eval_every == 0 || done == cfg.steps {
            Some(evaluate(model, corpus, cfg)?)
        } else {
            None
        };
        metrics.push(StepMetric {
            step: done,
            lr: lr_label * factor,
            train_loss: loss,
            val_ppl,
        });
    }
    Ok(metrics)
}

fn final_ppl(metrics: &[StepMetric], initial: f64) -> f64 {
    metrics.last().and_then(|m| m.val_ppl).unwrap_or(initial)
}

/// Full-precision phase: every parameter trains.
pub fn run_pretrain(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Model, RunReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = Model::new(cfg.model, &mut Rng::new(cfg.seed).fork(INIT_STREAM))?;
    check_corpus(corpus, cfg, &model)?;
    let initial_ppl = evaluate(&model, corpus, cfg)?;
    let trainable_params = model.trainable_count();
    let metrics = train_loop(&mut model, corpus, cfg, cfg.lr_pretrain, |name| {
        let wd = if name.ends_with(".w") { cfg.weight_decay_w } else { 0.0 };
        (cfg.lr_pretrain, wd)
    })?;
    let report = RunReport {
        mode: "fp".into(),
        steps: cfg.steps,
        estimator: None,
        rtn_ppl: None,
        initial_ppl,
        final_ppl: final_ppl(&metrics, initial_ppl),
        fused_ppl: None,
        trainable_params,
        metrics,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn require_fp(model: &Model) -> Result<()> {
    if model.layer_mode() != LayerMode::Fp {
        return Err(Error::Config(format!(
            "expected a full-precision checkpoint, got {:?} layers",
            model.layer_mode()
        )));
    }
    Ok(())
}

fn fp_weight<'a>(name: &str, lin: &'a Linear) -> Result<&'a crate::numcore::Matrix> {
    match lin {
        Linear::Fp(w) => Ok(w),
        other => Err(Error::Config(format!("{name} is {}, not fp", other.kind()))),
    }
}

fn act_quant(cfg: &TrainConfig) -> ActQuant {
    ActQuant {
        act_bits: cfg.act_bits,
        kv_bits: cfg.kv_bits,
    }
}

/// Round-to-nearest quantized copy of `fp` with ranges from `estimator`.
pub fn rtn_model(fp: &Model, cfg: &TrainConfig, estimator: &RangeEstimator) -> Result<Model> {
    require_fp(fp)?;
    let spec = cfg.spec();
    let mut model = fp.clone();
    model.convert_linears(|name, lin| {
        let w = fp_weight(name, lin)?;
        let params = estimator.estimate(w, &spec)?;
        let q = fake_quant(w, &spec, &params)?;
        Ok(Linear::Fused(FusedLayer::new(q.codes, params.scale, params.zero, spec)?))
    })?;
    model.act = act_quant(cfg);
    model.frozen_base = true;
    Ok(model)
}

/// Evaluates min-max and every Lp estimator, picking the lowest perplexity
/// (earliest on ties).
pub fn run_rtn(fp: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<RtnReport> {
    cfg.validate()?;
    check_corpus(corpus, cfg, fp)?;
    let mut rows = Vec::new();
    let mut best: Option<(RangeEstimator, f64)> = None;
    for est in RangeEstimator::sweep() {
        let ppl = evaluate(&rtn_model(fp, cfg, &est)?, corpus, cfg)?;
        rows.push(RtnRow {
            estimator: est.label(),
            ppl,
        });
        if best.is_none_or(|(_, b)| ppl < b) {
            best = Some((est, ppl));
        }
    }
    let (best, best_ppl) = best.expect("sweep is non-empty");
    Ok(RtnReport {
        rows,
        best_label: best.label(),
        best,
        best_ppl,
    })
}

fn resolve_estimator(
    fp: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(RangeEstimator, f64)> {
    match cfg.estimator {
        Some(e) => Ok((e, evaluate(&rtn_model(fp, cfg, &e)?, corpus, cfg)?)),
        None => {
            let r = run_rtn(fp, corpus, cfg)?;
            Ok((r.best, r.best_ppl))
        }
    }
}

fn fit(w: &crate::numcore::Matrix, cfg: &TrainConfig, est: &RangeEstimator) -> Result<QuantParams> {
    est.estimate(w, &cfg.spec())
}

/// LR-QAT model from `fp`: frozen `Φ₀` in the configured format and
/// adapters initialized per `cfg.init`.
pub fn build_lrqat_model(fp: &Model, cfg: &TrainConfig, est: &RangeEstimator) -> Result<Model> {
    require_fp(fp)?;
    let spec = cfg.spec();
    let format = cfg.downcast_format();
    let mut rng = Rng::new(cfg.seed).fork(ADAPTER_STREAM);
    let mut model = fp.clone();
    model.convert_linears(|name, lin| {
        let w = fp_weight(name, lin)?;
        let params = fit(w, cfg, est)?;
        let mut layer = LrQatLayer::new(w, &params, spec, format, cfg.rank, cfg.alpha)?;
        match cfg.init {
            AdapterInit::Lora => layer.init_lora(&mut rng),
            AdapterInit::Loftq => layer.init_loftq(w, cfg.loftq_iterations)?,
        }
        Ok(Linear::LrQat(layer))
    })?;
    model.act = act_quant(cfg);
    model.frozen_base = true;
    model.train_scale = cfg.lr_scale > 0.0;
    Ok(model)
}

/// LSQ model from `fp`: trainable `W = W₀` and `s = s₀`.
pub fn build_lsq_model(fp: &Model, cfg: &TrainConfig, est: &RangeEstimator) -> Result<Model> {
    require_fp(fp)?;
    let spec = cfg.spec();
    let mut model = fp.clone();
    model.convert_linears(|name, lin| {
        let w = fp_weight(name, lin)?;
        Ok(Linear::Lsq(LsqLayer::new(w.clone(), fit(w, cfg, est)?, spec)?))
    })?;
    model.act = act_quant(cfg);
    model.frozen_base = true;
    model.train_scale = cfg.lr_scale > 0.0;
    Ok(model)
}

/// Replaces every quantized linear with its integer form, checking that the
/// dequantized weight equals the simulated one exactly.
pub fn fuse_model(model: &Model) -> Result<Model> {
    let mut fused = model.clone();
    fused.convert_linears(|name, lin| {
        let (layer, simulated) = match lin {
            Linear::LrQat(l) => (l.fuse()?, l.forward_weight().w_hat),
            Linear::Lsq(l) => (l.fuse()?, l.forward_weight().w_hat),
            Linear::Fused(l) => return Ok(Linear::Fused(l.clone())),
            Linear::Fp(_) => {
                return Err(Error::Config(format!("{name} is full precision and cannot be fused")))
            }
        };
        let diff = layer.dequantize().max_abs_diff(&simulated)?;
        if diff != 0.0 {
            return Err(Error::Fusion(format!(
                "{name}: fused weight differs from the simulated weight by {diff:e}"
            )));
        }
        Ok(Linear::Fused(layer))
    })?;
    Ok(fused)
}

#[allow(clippy::too_many_arguments)]
fn finish_qat(
    mode: &str,
    mut model: Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    est: RangeEstimator,
    rtn_ppl: f64,
    start: Instant,
    lr_label: f64,
    hyper: impl Fn(&str) -> (f64, f64),
) -> Result<QatOutcome> {
    let initial_ppl = evaluate(&model, corpus, cfg)?;
    let trainable_params = model.trainable_count();
    let metrics = train_loop(&mut model, corpus, cfg, lr_label, hyper)?;
    let final_ppl = final_ppl(&metrics, initial_ppl);
    let fused = fuse_model(&model)?;
    let fused_ppl = evaluate(&fused, corpus, cfg)?;
    if fused_ppl.to_bits() != final_ppl.to_bits() {
        return Err(Error::Fusion(format!(
            "fused perplexity {fused_ppl} differs from simulated {final_ppl}"
        )));
    }
    let report = RunReport {
        mode: mode.into(),
        steps: cfg.steps,
        estimator: Some(est.label()),
        rtn_ppl: Some(rtn_ppl),
        initial_ppl,
        final_ppl,
        fused_ppl: Some(fused_ppl),
        trainable_params,
        metrics,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    Ok(QatOutcome {
        report,
        simulated: model,
        fused,
    })
}

/// Extended pretraining with LR-QAT on `{A, B, s}`.
pub fn run_lrqat(fp: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<QatOutcome> {
    cfg.validate()?;
    require_fp(fp)?;
    check_corpus(corpus, cfg, fp)?;
    let start = Instant::now();
    let (est, rtn_ppl) = resolve_estimator(fp, corpus, cfg)?;
    let model = build_lrqat_model(fp, cfg, &est)?;
    finish_qat("lrqat", model, corpus, cfg, est, rtn_ppl, start, cfg.lr_adapters, |name| {
        if name.ends_with(".s") {
            (cfg.lr_scale, cfg.weight_decay)
        } else {
            (cfg.lr_adapters, cfg.weight_decay)
        }
    })
}

/// Full-model QAT baseline on `{W, s}`. Weight decay applies to `W` only.
pub fn run_lsq(fp: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<QatOutcome> {
    cfg.validate()?;
    require_fp(fp)?;
    check_corpus(corpus, cfg, fp)?;
    let start = Instant::now();
    let (est, rtn_ppl) = resolve_estimator(fp, corpus, cfg)?;
    let model = build_lsq_model(fp, cfg, &est)?;
    finish_qat("lsq", model, corpus, cfg, est, rtn_ppl, start, cfg.lr_weights, |name| {
        if name.ends_with(".s") {
            (cfg.lr_scale, cfg.weight_decay)
        } else {
            (cfg.lr_weights, cfg.weight_decay_w)
        }
    })
}

fn with_fixed_estimator(fp: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainConfig> {
    cfg.validate()?;
    check_corpus(corpus, cfg, fp)?;
    let (est, _) = resolve_estimator(fp, corpus, cfg)?;
    Ok(TrainConfig {
        estimator: Some(est),
        ..cfg.clone()
    })
}

fn ablation_row(out: &QatOutcome, cfg: &TrainConfig) -> AblationRow {
    AblationRow {
        rank: cfg.rank,
        downcast: cfg.downcast_format().label(),
        init: match cfg.init {
            AdapterInit::Lora => "lora".into(),
            AdapterInit::Loftq => format!("loftq(T={})", cfg.loftq_iterations),
        },
        initial_ppl: out.report.initial_ppl,
        final_ppl: out.report.final_ppl,
    }
}

/// One LR-QAT run per rank, sharing the range estimate.
pub fn ablate_rank(
    fp: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    ranks: &[usize],
) -> Result<Vec<AblationRow>> {
    let base = with_fixed_estimator(fp, corpus, cfg)?;
    ranks
        .iter()
        .map(|&rank| {
            let c = TrainConfig { rank, ..base.clone() };
            Ok(ablation_row(&run_lrqat(fp, corpus, &c)?, &c))
        })
        .collect()
}

/// Every storage format valid for `cfg.bits` crossed with LoRA, LoftQ
/// (T = 1) and LoftQ (T = 64) initialization.
pub fn ablate_downcast(fp: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    let base = with_fixed_estimator(fp, corpus, cfg)?;
    let inits = [(AdapterInit::Lora, 1), (AdapterInit::Loftq, 1), (AdapterInit::Loftq, 64)];
    let mut rows = Vec::new();
    for kind in DowncastKind::ALL {
        if kind.format(cfg.bits).validate().is_err() {
            continue;
        }
        for (init, t) in inits {
            let c = TrainConfig {
                downcast: kind,
                init,
                loftq_iterations: t,
                ..base.clone()
            };
            rows.push(ablation_row(&run_lrqat(fp, corpus, &c)?, &c));
        }
    }
    Ok(rows)
}

/// Writes `step,lr,train_loss,val_ppl`, one row per step; `val_ppl` is
/// empty on steps without evaluation.
pub fn write_metrics_csv(path: &Path, metrics: &[StepMetric]) -> Result<()> {
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(["step", "lr", "train_loss", "val_ppl"]).map_err(to_io)?;
    for m in metrics {
        w.write_record([
            m.step.to_string(),
            m.lr.to_string(),
            m.train_loss.to_string(),
            m.val_ppl.map(|p| p.to_string()).unwrap_or_default(),
        ])
        .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
