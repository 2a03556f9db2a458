//! Length generalization for relative-position transformers through a
//! Lambda-shaped attention mask and a distance limit.
//!
//! Each query attends to the first `n_global` tokens and to the `n_local` most
//! recent ones, and every distance fed to the positional logit is clamped at
//! the pretraining length. The crate pairs the mechanism with a bounded
//! streaming KV cache, a small trainable decoder-only transformer, and the
//! diagnostics and evaluation tooling used to check its behavior.

pub mod attention;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod kv_cache;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod pos_encoding;
pub mod rng;

pub use attention::{attend, attend_single, AttentionConfig, AttentionMode, AttentionOutput};
pub use error::{Error, Result};
pub use kv_cache::KvCache;
pub use mask::{
    build_mask, effective_distance, mask_density, EffectiveDistance, LambdaMask, MaskParams,
};
pub use metrics::{bleu, rouge_lsum, BleuConfig, NgramCounts};
pub use model::{ToyModel, ToyModelConfig};
pub use pos_encoding::{
    alibi_logit, rope_logit, rope_rotate, AlibiParams, PositionEncoding, RopeParams,
};
