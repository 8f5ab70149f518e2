//! Byte-level toy transformer whose linear layers can be full precision,
//! LSQ-quantized, LR-QAT, or fused integer layers.

mod corpus;
mod linear;
mod loss;
mod model;

pub use corpus::{load_corpus, synthetic_text, Batch, Corpus};
pub use linear::Linear;
pub use loss::cross_entropy_and_grad;
pub use model::{
    perplexity, ActQuant, Block, ForwardCache, Grads, LayerMode, Model, ModelConfig, VOCAB,
};
