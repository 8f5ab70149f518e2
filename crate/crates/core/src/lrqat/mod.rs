//! Quantization-aware linear layers.
//!
//! [`LrQatLayer`] keeps the pretrained weights frozen as `Φ₀ = φ(W₀ / s₀)` and
//! trains a rank-`r` correction that sits inside the rounding operator:
//!
//! ```text
//! P  = φ⁻¹(Φ₀) + (α/r)·A·B
//! W_Z = clip(round(P) + z₀, −2^(b−1), 2^(b−1)−1)
//! Ŵ  = s · (W_Z − z₀)
//! ```
//!
//! Gradients use the straight-through estimator for `round`. The quantizer is
//! recomputed in the backward pass instead of keeping `P` and the clip mask
//! alive between forward and backward.
//!
//! [`LsqLayer`] is the full-model QAT baseline with trainable `W` and `s`.

mod fused;
mod layer;
mod lsq;

pub use fused::FusedLayer;
pub use layer::{
    adapter_ratio, CachedForward, LayerGrads, LrQatLayer, ParamReport, WeightQuant,
};
pub use lsq::{lsq_forward_backward, LsqLayer, LsqOutput};
