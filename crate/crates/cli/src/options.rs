use std::path::{Path, PathBuf};

use clap::Args;
use lrqat_core::quantsim::{Granularity, RangeEstimator};
use lrqat_core::trainer::{AdapterInit, DowncastKind, TrainConfig};

use crate::Failure;

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    match s {
        "per_tensor" | "tensor" => Ok(Granularity::PerTensor),
        "per_channel" | "channel" => Ok(Granularity::PerChannel),
        _ => s
            .strip_prefix("per_group:")
            .or_else(|| s.strip_prefix('g'))
            .and_then(|g| g.parse().ok())
            .map(Granularity::PerGroup)
            .ok_or_else(|| format!("expected per_tensor, per_channel or g<size>, got {s:?}")),
    }
}

fn parse_estimator(s: &str) -> Result<RangeEstimator, String> {
    if s == "minmax" || s == "min-max" {
        return Ok(RangeEstimator::MinMax);
    }
    s.strip_prefix('L')
        .or_else(|| s.strip_prefix("lp"))
        .and_then(|p| p.parse::<f64>().ok())
        .map(RangeEstimator::lp)
        .ok_or_else(|| format!("expected minmax or L<p> (e.g. L2.4), got {s:?}"))
}

fn parse_downcast(s: &str) -> Result<DowncastKind, String> {
    match s {
        "fp32" => Ok(DowncastKind::Fp32),
        "bf16" => Ok(DowncastKind::Bf16),
        "fixed_point" | "fixed" => Ok(DowncastKind::FixedPoint),
        "int_packed" | "int" => Ok(DowncastKind::IntPacked),
        _ => Err(format!("expected fp32, bf16, fixed_point or int_packed, got {s:?}")),
    }
}

fn parse_init(s: &str) -> Result<AdapterInit, String> {
    match s {
        "lora" => Ok(AdapterInit::Lora),
        "loftq" => Ok(AdapterInit::Loftq),
        _ => Err(format!("expected lora or loftq, got {s:?}")),
    }
}

/// Settings shared by every subcommand. Values given here override the
/// JSON config file, which overrides the built-in defaults.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON file with keys mirroring the training configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Evaluate on at most this many validation windows
    #[arg(long)]
    pub eval_windows: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub lr_pretrain: Option<f64>,
    #[arg(long)]
    pub lr_adapters: Option<f64>,
    /// Scale learning rate; 0 freezes the scales
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub lr_weights: Option<f64>,
    /// Weight bit width
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long)]
    pub asymmetric: bool,
    /// per_tensor, per_channel or g<size>
    #[arg(long, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
    #[arg(long)]
    pub act_bits: Option<u8>,
    #[arg(long)]
    pub kv_bits: Option<u8>,
    /// minmax or L<p>; default picks the best of the RTN sweep
    #[arg(long, value_parser = parse_estimator)]
    pub estimator: Option<RangeEstimator>,
    /// fp32, bf16, fixed_point or int_packed
    #[arg(long, value_parser = parse_downcast)]
    pub downcast: Option<DowncastKind>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// lora or loftq
    #[arg(long, value_parser = parse_init)]
    pub init: Option<AdapterInit>,
    #[arg(long)]
    pub loftq_iterations: Option<usize>,
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Failure::Usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                TrainConfig::from_json(&text)?
            }
            None => TrainConfig::default(),
        };
        apply!(
            cfg, self, seed, steps, batch_size, seq_len, warmup_fraction, eval_every,
            lr_pretrain, lr_adapters, lr_scale, lr_weights, bits, granularity, downcast, rank,
            alpha, init, loftq_iterations
        );
        if let Some(v) = self.eval_windows {
            cfg.eval_windows = Some(v);
        }
        if let Some(v) = self.act_bits {
            cfg.act_bits = Some(v);
        }
        if let Some(v) = self.kv_bits {
            cfg.kv_bits = Some(v);
        }
        if let Some(v) = self.estimator {
            cfg.estimator = Some(v);
        }
        if self.asymmetric {
            cfg.symmetric = false;
        }
        let m = &mut cfg.model;
        apply!(m, self, d_model, n_heads, n_layers, d_ff, max_seq_len);
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn granularity_spellings() {
        assert_eq!(parse_granularity("g8"), Ok(Granularity::PerGroup(8)));
        assert_eq!(parse_granularity("per_group:16"), Ok(Granularity::PerGroup(16)));
        assert_eq!(parse_granularity("per_channel"), Ok(Granularity::PerChannel));
        assert!(parse_granularity("rows").is_err());
    }

    #[test]
    fn estimator_spellings() {
        assert_eq!(parse_estimator("minmax"), Ok(RangeEstimator::MinMax));
        assert_eq!(parse_estimator("L2.4"), Ok(RangeEstimator::lp(2.4)));
        assert!(parse_estimator("L").is_err());
    }
}
