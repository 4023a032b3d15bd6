//! gradgpt-core — a next-token-prediction transformer engine with
//! hand-derived analytical gradients.
//!
//! Every layer exposes a closed-form `forward` and a matching `backward`
//! written directly from the calculus — no autodiff, no computation graph.
//! The [`gradcheck`] module verifies the analytical gradients against a
//! central-difference oracle.
//!
//! Module map:
//! - [`scalar`] / [`tensor`] — element precision abstraction and the dense
//!   row-major matrix kernel (matmul, Hadamard, Frobenius/feature dots,
//!   broadcasts, masked softmax).
//! - [`layers`] — embedding, linear, causal self-attention (single- and
//!   multi-head), layer norm, activations, low-rank adapters, cross-entropy.
//! - [`model`] — the decoder-only architecture: config, parameters, forward
//!   trace, full backward pass, parameter counting, checkpoints.
//! - [`gradcheck`] — finite-difference verification sweeps.
//! - [`inference`] — KV-cached autoregressive generation.
//! - [`train`] — corpus handling, SGD/AdamW, the training loop.

pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use inference::{decode_step, generate, prefill, sample_token, KVCache, SamplerSpec, SamplerStrategy};
pub use model::{
    merge_lora, model_backward, model_forward, model_loss, ForwardTrace, LoraAttach, LoraConfig,
    ModelConfig, ModelGrads, ModelParams,
};
pub use scalar::Scalar;
pub use train::{synthetic_text, train_loop, AdamW, Corpus, Optimizer, Sgd, TrainConfig, Vocab, VocabKind, WindowSampler};
pub use tensor::{broadcast_col, broadcast_row, dot, softmax_rows, CausalMask, Matrix};
