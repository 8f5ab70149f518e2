//! Low-rank quantization-aware training (LR-QAT) at desk scale.
//!
//! Frozen pretrained weights are divided by their initial quantization scale
//! and stored in a compact format (`Φ₀`); a trainable low-rank product is
//! added *inside* the rounding operator, so after training the adapters fold
//! into a single integer matrix with no loss:
//!
//! ```text
//! Ŵ = s · (clip(round(Φ₀ + (α/r)·A·B) + z₀, −2^(b−1), 2^(b−1)−1) − z₀)
//! ```
//!
//! Modules, bottom-up:
//! - [`numcore`]: matrices, RNG, truncated SVD, finite differences.
//! - [`quantsim`]: uniform affine fake quantization and range estimation.
//! - [`downcast`]: storage formats for `Φ₀` (FP32, BF16, fixed point, packed INT-b).
//! - [`lrqat`]: the LR-QAT layer, its full-QAT (LSQ) baseline and fusion.
//! - [`nanollm`]: byte-level toy transformer with pluggable linear layers.
//! - [`trainer`]: AdamW, schedules, checkpoints, memory accounting, runs.

pub mod downcast;
pub mod error;
pub mod lrqat;
pub mod nanollm;
pub mod numcore;
pub mod quantsim;
pub mod trainer;

pub use downcast::{DowncastFormat, DowncastTensor};
pub use error::{Error, Result};
pub use lrqat::{FusedLayer, LayerGrads, LrQatLayer, LsqLayer};
pub use numcore::{Matrix, Rng};
pub use quantsim::{Granularity, QuantParams, QuantSpec, RangeEstimator};
