use serde::{Deserialize, Serialize};

use crate::downcast::DowncastFormat;
use crate::error::{Error, Result};
use crate::nanollm::ModelConfig;
use crate::quantsim::{Granularity, QuantSpec, RangeEstimator};

/// Storage format of `Φ₀`; the bounded formats take their bit width from
/// the weight quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DowncastKind {
    Fp32,
    Bf16,
    FixedPoint,
    IntPacked,
}

impl DowncastKind {
    pub fn format(self, bits: u8) -> DowncastFormat {
        match self {
            DowncastKind::Fp32 => DowncastFormat::Fp32,
            DowncastKind::Bf16 => DowncastFormat::Bf16,
            DowncastKind::FixedPoint => DowncastFormat::FixedPoint(bits),
            DowncastKind::IntPacked => DowncastFormat::IntPacked(bits),
        }
    }

    pub const ALL: [DowncastKind; 4] = [
        DowncastKind::Fp32,
        DowncastKind::Bf16,
        DowncastKind::FixedPoint,
        DowncastKind::IntPacked,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    Lora,
    Loftq,
}

/// Every knob of the pretraining and QAT runs. Missing keys take the
/// defaults below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub split_fraction: f64,

    pub steps: usize,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    /// Evaluate validation perplexity every this many steps (and at the end).
    pub eval_every: usize,
    /// Cap on validation windows per evaluation; `None` uses all of them.
    pub eval_windows: Option<usize>,

    /// Peak learning rate of the full-precision phase.
    pub lr_pretrain: f64,
    /// Weight decay on linear weights, full-precision phase and LSQ.
    pub weight_decay_w: f64,
    /// Peak learning rate of `A` and `B`.
    pub lr_adapters: f64,
    /// Peak learning rate of the scales; 0 keeps `s = s₀` frozen.
    pub lr_scale: f64,
    /// Peak learning rate of `W` in LSQ.
    pub lr_weights: f64,
    /// Weight decay on adapters and scales.
    pub weight_decay: f64,

    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub act_bits: Option<u8>,
    pub kv_bits: Option<u8>,
    /// Range estimator for `s₀`; `None` picks the best of the RTN sweep.
    pub estimator: Option<RangeEstimator>,
    pub downcast: DowncastKind,
    pub rank: usize,
    pub alpha: f64,
    pub init: AdapterInit,
    pub loftq_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            seed: 0,
            split_fraction: 0.9,
            steps: 500,
            warmup_fraction: 0.1,
            batch_size: 4,
            seq_len: 128,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            eval_every: 100,
            eval_windows: None,
            lr_pretrain: 3e-3,
            weight_decay_w: 0.1,
            lr_adapters: 1e-3,
            lr_scale: 1e-5,
            lr_weights: 1e-4,
            weight_decay: 0.0,
            bits: 4,
            symmetric: true,
            granularity: Granularity::PerChannel,
            act_bits: None,
            kv_bits: None,
            estimator: None,
            downcast: DowncastKind::FixedPoint,
            rank: 32,
            alpha: 1.0,
            init: AdapterInit::Lora,
            loftq_iterations: 1,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl TrainConfig {
    pub fn spec(&self) -> QuantSpec {
        QuantSpec {
            bits: self.bits,
            symmetric: self.symmetric,
            granularity: self.granularity,
        }
    }

    pub fn downcast_format(&self) -> DowncastFormat {
        self.downcast.format(self.bits)
    }

    /// Checks every field and their combinations, before any compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.spec().validate()?;
        if self.seq_len == 0 || self.seq_len > self.model.max_seq_len {
            return Err(invalid(format!(
                "seq_len {} must be in 1..={}",
                self.seq_len, self.model.max_seq_len
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup_fraction must be in [0, 1)"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(invalid("split_fraction must be in (0, 1)"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(invalid("betas must be in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(invalid("adam_eps and grad_clip_norm must be positive"));
        }
        for (name, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_adapters", self.lr_adapters),
            ("lr_scale", self.lr_scale),
            ("lr_weights", self.lr_weights),
            ("weight_decay", self.weight_decay),
            ("weight_decay_w", self.weight_decay_w),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be a non-negative number")));
            }
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be positive"));
        }
        if self.eval_windows == Some(0) {
            return Err(invalid("eval_windows must be positive"));
        }
        for (name, b) in [("act_bits", self.act_bits), ("kv_bits", self.kv_bits)] {
            if let Some(b) = b {
                if !(2..=8).contains(&b) {
                    return Err(invalid(format!("{name} must be in 2..=8")));
                }
            }
        }
        if let Some(e) = &self.estimator {
            e.validate()?;
        }
        self.downcast_format().validate()?;
        let min_dim = self.model.d_model.min(self.model.d_ff);
        if self.rank == 0 || self.rank >= min_dim {
            return Err(invalid(format!("rank {} must be in 1..{min_dim}", self.rank)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha must be positive"));
        }
        if self.init == AdapterInit::Loftq && self.loftq_iterations == 0 {
            return Err(invalid("loftq_iterations must be at least 1"));
        }
        if let Granularity::PerGroup(g) = self.granularity {
            if g == 0 || !self.model.d_model.is_multiple_of(g) || !self.model.d_ff.is_multiple_of(g) {
                return Err(invalid(format!(
                    "group size {g} must divide d_model and d_ff"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_common_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.betas, (0.9, 0.95));
        assert_eq!(c.warmup_fraction, 0.1);
        assert_eq!(c.grad_clip_norm, 1.0);
        assert_eq!(c.weight_decay, 0.0);
        assert_eq!(c.alpha, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_uses_defaults_and_unknown_keys_fail() {
        let c = TrainConfig::from_json(r#"{"bits": 3, "rank": 4}"#).unwrap();
        assert_eq!((c.bits, c.rank, c.steps), (3, 4, 500));
        assert!(TrainConfig::from_json(r#"{"bitz": 3}"#).is_err());
        let c = TrainConfig::from_json(
            r#"{"estimator": {"method": "lp", "p": 2.4}, "granularity": {"per_group": 16}}"#,
        )
        .unwrap();
        assert_eq!(c.estimator, Some(RangeEstimator::lp(2.4)));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_combinations() {
        let bad = [
            TrainConfig { rank: 64, ..Default::default() },
            TrainConfig { bits: 5, downcast: DowncastKind::IntPacked, ..Default::default() },
            TrainConfig { seq_len: 256, ..Default::default() },
            TrainConfig { act_bits: Some(1), ..Default::default() },
            TrainConfig { granularity: Granularity::PerGroup(48), ..Default::default() },
            TrainConfig { lr_scale: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_) | Error::Shape(_))), "{c:?}");
        }
    }
}
