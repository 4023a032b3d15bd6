//! Network layers as pairs of pure operations.
//!
//! Each layer exposes `*_forward` (input → output, plus whatever cache the
//! gradient needs) and `*_backward` (upstream error signal + cache →
//! downstream error signal + parameter gradients). The backward functions
//! implement the closed-form derivative expressions directly — there is no
//! graph or tape — and every one of them is checked against central
//! differences in this module's tests and again by the `gradcheck` sweep.

pub mod activation;
pub mod attention;
pub mod embedding;
pub mod linear;
pub mod lora;
pub mod loss;
pub mod norm;

pub use activation::{activation_backward, activation_forward, Activation};
pub use attention::{
    attention_core_backward, attention_from_qkv, attention_head_backward,
    attention_head_forward, mha_backward, mha_forward, softmax_backward_rows,
    AttentionHeadGrads, AttentionHeadParams, HeadCache,
};
pub use embedding::{embedding_backward, embedding_forward, EmbeddingParams};
pub use linear::{linear_backward, linear_forward, LinearGrads, LinearParams};
pub use lora::{lora_backward, lora_forward, LoRAGrads, LoRAParams};
pub use loss::{loss_backward, loss_forward};
pub use norm::{layernorm_backward, layernorm_forward, LayerNormGrads, LayerNormParams, NormCache};
