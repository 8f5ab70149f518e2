//! Analytic training-memory accounting per layer mode.
//!
//! Trainable tensors, their gradients and both Adam moments are counted at
//! 8 bytes per element (the `f64` the trainer uses). Frozen `Φ₀` is counted
//! at its storage payload size.

use std::fmt::Write as _;

use serde::Serialize;

use crate::downcast::DowncastFormat;
use crate::quantsim::QuantSpec;

const F64: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryRow {
    pub weights: usize,
    pub gradients: usize,
    pub optimizer: usize,
    pub intermediate: usize,
    pub trainable_params: usize,
}

impl MemoryRow {
    pub fn total(&self) -> usize {
        self.weights + self.gradients + self.optimizer + self.intermediate
    }

    /// Bytes of the trainable tensors plus their optimizer state.
    pub fn trainable_and_optimizer(&self) -> usize {
        self.trainable_params * F64 + self.optimizer
    }

    fn add(&mut self, o: MemoryRow) {
        self.weights += o.weights;
        self.gradients += o.gradients;
        self.optimizer += o.optimizer;
        self.intermediate += o.intermediate;
        self.trainable_params += o.trainable_params;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeMemory {
    pub mode: String,
    #[serde(flatten)]
    pub bytes: MemoryRow,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub rank: usize,
    pub checkpointing: bool,
    pub layers: usize,
    pub modes: Vec<ModeMemory>,
}

/// Layer mode whose memory is being accounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    Fp,
    Lsq,
    Lrqat(DowncastFormat),
}

impl MemoryMode {
    pub fn label(&self) -> String {
        match self {
            MemoryMode::Fp => "fp".into(),
            MemoryMode::Lsq => "lsq".into(),
            MemoryMode::Lrqat(f) => format!("lrqat-{}", f.label()),
        }
    }
}

/// Bytes for one `m × k` linear layer.
pub fn layer_memory(
    m: usize,
    k: usize,
    spec: &QuantSpec,
    mode: MemoryMode,
    rank: usize,
    checkpointing: bool,
) -> MemoryRow {
    let (pr, pc) = spec.param_shape(m, k);
    let scales = pr * pc;
    let mk = m * k;
    let trainable = match mode {
        MemoryMode::Fp => mk,
        MemoryMode::Lsq => mk + scales,
        MemoryMode::Lrqat(_) => rank * (m + k) + scales,
    };
    let weights = match mode {
        MemoryMode::Fp => mk * F64,
        MemoryMode::Lsq => (mk + scales) * F64 + scales,
        // Φ₀, adapters, s, frozen s₀ and one byte per zero offset.
        MemoryMode::Lrqat(f) => f.payload_len(mk) + (trainable + scales) * F64 + scales,
    };
    // The m×k buffers the backward pass needs: W/s or P in f64 plus a
    // one-byte clip mask. Recomputing the quantizer avoids them.
    let intermediate = match mode {
        MemoryMode::Fp => 0,
        MemoryMode::Lsq | MemoryMode::Lrqat(_) if checkpointing => 0,
        _ => mk * (F64 + 1),
    };
    MemoryRow {
        weights,
        gradients: trainable * F64,
        optimizer: 2 * trainable * F64,
        intermediate,
        trainable_params: trainable,
    }
}

/// Sums [`layer_memory`] over `(m, k)` layer shapes for fp, LSQ, and LR-QAT
/// with each storage format.
pub fn memory_report(
    shapes: &[(usize, usize)],
    spec: &QuantSpec,
    rank: usize,
    checkpointing: bool,
) -> MemoryReport {
    let b = spec.bits;
    let mut modes = vec![MemoryMode::Fp, MemoryMode::Lsq];
    modes.push(MemoryMode::Lrqat(DowncastFormat::Fp32));
    modes.push(MemoryMode::Lrqat(DowncastFormat::Bf16));
    if (2..=7).contains(&b) {
        modes.push(MemoryMode::Lrqat(DowncastFormat::FixedPoint(b)));
    }
    if (2..=4).contains(&b) {
        modes.push(MemoryMode::Lrqat(DowncastFormat::IntPacked(b)));
    }
    let modes = modes
        .into_iter()
        .map(|mode| {
            let mut bytes = MemoryRow {
                weights: 0,
                gradients: 0,
                optimizer: 0,
                intermediate: 0,
                trainable_params: 0,
            };
            for &(m, k) in shapes {
                bytes.add(layer_memory(m, k, spec, mode, rank, checkpointing));
            }
            ModeMemory {
                mode: mode.label(),
                bytes,
                total: bytes.total(),
            }
        })
        .collect();
    MemoryReport {
        rank,
        checkpointing,
        layers: shapes.len(),
        modes,
    }
}

impl MemoryReport {
    pub fn mode(&self, label: &str) -> Option<&ModeMemory> {
        self.modes.iter().find(|m| m.mode == label)
    }

    /// Aligned text table, one row per mode.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} layers, rank {}, checkpointing {}",
            self.layers,
            self.rank,
            if self.checkpointing { "on" } else { "off" }
        );
        let _ = writeln!(
            out,
            "{:<14} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}",
            "mode", "params", "weights", "gradients", "optimizer", "intermediate", "total"
        );
        for m in &self.modes {
            let b = &m.bytes;
            let _ = writeln!(
                out,
                "{:<14} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}",
                m.mode, b.trainable_params, b.weights, b.gradients, b.optimizer, b.intermediate, m.total
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrqat::adapter_ratio;
    use crate::quantsim::Granularity;
    use proptest::prelude::*;

    fn pc(bits: u8) -> QuantSpec {
        QuantSpec::new(bits, true, Granularity::PerChannel).unwrap()
    }

    #[test]
    fn adapter_ratio_at_4096() {
        assert_eq!(adapter_ratio(4096, 4096, 32), 0.015625);
    }

    #[test]
    fn packed_phi0_is_half_of_fixed_point() {
        let spec = pc(4);
        let fixed = DowncastFormat::FixedPoint(4).payload_len(64 * 48);
        let packed = DowncastFormat::IntPacked(4).payload_len(64 * 48);
        assert_eq!(2 * packed, fixed);
        let a = layer_memory(64, 48, &spec, MemoryMode::Lrqat(DowncastFormat::FixedPoint(4)), 4, true);
        let b = layer_memory(64, 48, &spec, MemoryMode::Lrqat(DowncastFormat::IntPacked(4)), 4, true);
        assert_eq!(a.weights - b.weights, fixed - packed);
    }

    #[test]
    fn lsq_optimizer_holds_two_moments_per_weight() {
        let r = layer_memory(32, 16, &pc(4), MemoryMode::Lsq, 4, true);
        assert!(r.optimizer >= 2 * 4 * 32 * 16);
        assert_eq!(r.optimizer, 2 * 8 * (32 * 16 + 32));
    }

    #[test]
    fn checkpointing_removes_intermediates() {
        let mode = MemoryMode::Lrqat(DowncastFormat::IntPacked(4));
        assert_eq!(layer_memory(8, 8, &pc(4), mode, 2, true).intermediate, 0);
        assert_eq!(layer_memory(8, 8, &pc(4), mode, 2, false).intermediate, 64 * 9);
    }

    #[test]
    fn report_sums_layers_and_renders() {
        let rep = memory_report(&[(16, 8), (8, 16)], &pc(3), 2, true);
        let fp = rep.mode("fp").unwrap();
        assert_eq!(fp.bytes.weights, 2 * 128 * 8);
        assert_eq!(fp.total, fp.bytes.weights * 4);
        assert!(rep.mode("lrqat-Q3.5").is_some());
        assert!(rep.mode("lrqat-INT3x2").is_some());
        let text = rep.to_text();
        assert_eq!(text.lines().count(), 2 + rep.modes.len());
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["modes"][0]["mode"], "fp");
        assert!(json["modes"][0]["optimizer"].is_u64());
    }

    proptest! {
        #[test]
        fn lrqat_is_cheaper_below_a_third(m in 3usize..200, k in 3usize..200, frac in 0.0f64..1.0) {
            let max_r = m.min(k).div_ceil(3) - 1;
            prop_assume!(max_r >= 1);
            let r = 1 + ((max_r - 1) as f64 * frac) as usize;
            let spec = pc(4);
            let lr = layer_memory(m, k, &spec, MemoryMode::Lrqat(DowncastFormat::IntPacked(4)), r, true);
            let lsq = layer_memory(m, k, &spec, MemoryMode::Lsq, r, true);
            prop_assert!(lr.trainable_and_optimizer() < lsq.trainable_and_optimizer());
        }
    }
}
