//! The decoder-only next-token-prediction model.
//!
//! Architecture, end to end: token + position embeddings; `n_blocks`
//! transformer blocks, each `LN ▷ (multi-head attention ▷ FC) ▷ skip/add ▷
//! LN ▷ (FC expand ▷ g ▷ FC contract) ▷ skip/add`; a final layer norm; a
//! logits projection (optionally weight-tied to the token table); and a row
//! softmax. [`model_forward`] records every intermediate activation in a
//! [`ForwardTrace`]; [`model_backward`] walks the chain in reverse with the
//! closed-form layer backward passes and returns a [`ModelGrads`] mirroring
//! the parameter tree.
//!
//! Low-rank adapters can be attached in parallel to any of the projection
//! layers; when adapters are configured the base weights are frozen — their
//! gradients are materialized as exact zeros.

pub mod checkpoint;
pub mod counts;

use crate::error::{Error, Result};
use crate::layers::{
    activation_backward, activation_forward, attention_core_backward, attention_from_qkv,
    embedding_backward, embedding_forward, layernorm_backward, layernorm_forward, linear_backward,
    linear_forward, lora_backward, lora_forward, loss_backward, Activation, AttentionHeadGrads,
    AttentionHeadParams, EmbeddingParams, HeadCache, LayerNormGrads, LayerNormParams, LinearGrads,
    LinearParams, LoRAGrads, LoRAParams, NormCache,
};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which projection layers carry a low-rank adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraAttach {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub att_proj: bool,
    pub expand: bool,
    pub contract: bool,
    pub logits: bool,
}

impl LoraAttach {
    pub fn all() -> Self {
        LoraAttach { q: true, k: true, v: true, att_proj: true, expand: true, contract: true, logits: true }
    }

    pub fn logits_only() -> Self {
        LoraAttach { q: false, k: false, v: false, att_proj: false, expand: false, contract: false, logits: true }
    }

    pub fn any(&self) -> bool {
        self.q || self.k || self.v || self.att_proj || self.expand || self.contract || self.logits
    }

    /// Comma-separated list, e.g. `"q,k,v,logits"`.
    pub fn to_list(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.q, "q"),
            (self.k, "k"),
            (self.v, "v"),
            (self.att_proj, "att_proj"),
            (self.expand, "expand"),
            (self.contract, "contract"),
            (self.logits, "logits"),
        ] {
            if on {
                parts.push(name);
            }
        }
        parts.join(",")
    }

    pub fn parse(list: &str) -> Result<Self> {
        let mut a = LoraAttach {
            q: false,
            k: false,
            v: false,
            att_proj: false,
            expand: false,
            contract: false,
            logits: false,
        };
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "q" => a.q = true,
                "k" => a.k = true,
                "v" => a.v = true,
                "att_proj" => a.att_proj = true,
                "expand" => a.expand = true,
                "contract" => a.contract = true,
                "logits" => a.logits = true,
                "all" => a = LoraAttach::all(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown adapter attach point '{other}' (expected q,k,v,att_proj,expand,contract,logits or all)"
                    )))
                }
            }
        }
        if !a.any() {
            return Err(Error::Config("adapter attach list is empty".into()));
        }
        Ok(a)
    }
}

/// Adapter hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub attach: LoraAttach,
}

/// Everything that fixes the model's shapes and behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Model width (feature count of the residual stream).
    pub d: usize,
    /// Number of attention heads per block.
    pub n_h: usize,
    /// Value width per head; `n_h · d_h = d`.
    pub d_h: usize,
    /// Query/key width per head; independent of `d_h`, conventionally equal.
    pub d_rho: usize,
    pub n_blocks: usize,
    pub n_vocab: usize,
    /// Maximum sequence length (size of the position table).
    pub n_context: usize,
    pub activation: Activation,
    /// Layer-norm variance cushion. Strictly positive in real models; exact
    /// 0 is allowed only in gradient-check fixtures.
    pub eps: f64,
    /// Reuse the token table (transposed) as the logits projection and drop
    /// the logits bias.
    pub weight_tying: bool,
    /// When present, adapters are attached and the base weights are frozen.
    pub lora: Option<LoraConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(self.d >= 2, format!("model width d must be at least 2, got {}", self.d))?;
        check(self.n_h >= 1, "need at least one attention head".into())?;
        check(
            self.n_h * self.d_h == self.d,
            format!("n_h ({}) × d_h ({}) must equal d ({})", self.n_h, self.d_h, self.d),
        )?;
        check(self.d_rho >= 1, "query/key width d_rho must be at least 1".into())?;
        check(self.n_blocks >= 1, "need at least one block".into())?;
        check(self.n_vocab >= 2, format!("vocabulary must have at least 2 entries, got {}", self.n_vocab))?;
        check(self.n_context >= 1, "context window must hold at least one token".into())?;
        check(self.eps >= 0.0, format!("eps must be non-negative, got {}", self.eps))?;
        if let Some(l) = &self.lora {
            check(l.r >= 1, "adapter rank must be at least 1".into())?;
            check(l.alpha > 0.0, format!("adapter gain must be positive, got {}", l.alpha))?;
            check(l.attach.any(), "adapter config present but no attach points set".into())?;
            // The tightest attached layer bounds the rank.
            let mut min_dim = usize::MAX;
            let a = &l.attach;
            let fused_rho = self.n_h * self.d_rho;
            if a.q || a.k {
                min_dim = min_dim.min(self.d.min(fused_rho));
            }
            if a.v || a.att_proj || a.expand || a.contract {
                min_dim = min_dim.min(self.d);
            }
            if a.logits {
                min_dim = min_dim.min(self.d.min(self.n_vocab));
            }
            check(
                l.r <= min_dim,
                format!("adapter rank {} exceeds the smallest attached layer dimension {min_dim}", l.r),
            )?;
        }
        Ok(())
    }

    /// The GPT-2-small shape: d=768, 12 heads × 64, 12 blocks, 1024 context,
    /// 50257-entry vocabulary.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            d: 768,
            n_h: 12,
            d_h: 64,
            d_rho: 64,
            n_blocks: 12,
            n_vocab: 50257,
            n_context: 1024,
            activation: Activation::Gelu,
            eps: 1e-5,
            weight_tying: false,
            lora: None,
        }
    }

    /// The tiny verification fixture used by gradient checks: 2,003
    /// parameters, d_ρ ≠ d_h on purpose.
    pub fn tiny_fixture() -> Self {
        ModelConfig {
            d: 8,
            n_h: 2,
            d_h: 4,
            d_rho: 3,
            n_blocks: 2,
            n_vocab: 11,
            n_context: 16,
            activation: Activation::Gelu,
            eps: 1e-5,
            weight_tying: false,
            lora: None,
        }
    }

    /// Width of the fused (all heads, concatenated) query/key feature map.
    pub fn fused_rho_width(&self) -> usize {
        self.n_h * self.d_rho
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Adapters of one block, one per attached projection. Query/key/value
/// adapters are fused across heads: a single `d → n_h·d_ρ` (or `d → d` for
/// values) low-rank map whose output is sliced per head.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAdapters<T: Scalar = f64> {
    pub q: Option<LoRAParams<T>>,
    pub k: Option<LoRAParams<T>>,
    pub v: Option<LoRAParams<T>>,
    pub att_proj: Option<LoRAParams<T>>,
    pub expand: Option<LoRAParams<T>>,
    pub contract: Option<LoRAParams<T>>,
}

/// One transformer block's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Scalar = f64> {
    pub ln1: LayerNormParams<T>,
    pub heads: Vec<AttentionHeadParams<T>>,
    pub att_proj: LinearParams<T>,
    pub ln2: LayerNormParams<T>,
    pub fc_expand: LinearParams<T>,
    pub fc_contract: LinearParams<T>,
    pub adapters: Option<BlockAdapters<T>>,
}

/// The full parameter tree.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f64> {
    pub w_tok: EmbeddingParams<T>,
    pub w_pos: EmbeddingParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_final: LayerNormParams<T>,
    /// Dense logits head; `None` exactly when weight tying is on (the token
    /// table is reused transposed, with no bias).
    pub fc_logits: Option<LinearParams<T>>,
    pub lora_logits: Option<LoRAParams<T>>,
}

fn block_adapters_zeros<T: Scalar>(config: &ModelConfig, l: &LoraConfig) -> BlockAdapters<T> {
    let alpha = T::from_f64(l.alpha);
    let mk = |on: bool, f_in: usize, f_out: usize| {
        on.then(|| LoRAParams::zeros(f_in, f_out, l.r, alpha))
    };
    let d = config.d;
    let fused = config.fused_rho_width();
    BlockAdapters {
        q: mk(l.attach.q, d, fused),
        k: mk(l.attach.k, d, fused),
        v: mk(l.attach.v, d, d),
        att_proj: mk(l.attach.att_proj, d, d),
        expand: mk(l.attach.expand, d, 4 * d),
        contract: mk(l.attach.contract, 4 * d, d),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters (layer norms at w=1, b=0) with the shapes the
    /// configuration dictates.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let eps = T::from_f64(config.eps);
        let d = config.d;
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                ln1: LayerNormParams::unit(d, eps),
                heads: (0..config.n_h)
                    .map(|_| AttentionHeadParams::zeros(d, config.d_rho, config.d_h))
                    .collect(),
                att_proj: LinearParams::zeros(d, d),
                ln2: LayerNormParams::unit(d, eps),
                fc_expand: LinearParams::zeros(d, 4 * d),
                fc_contract: LinearParams::zeros(4 * d, d),
                adapters: config.lora.as_ref().map(|l| block_adapters_zeros(config, l)),
            })
            .collect();
        let lora_logits = config.lora.as_ref().and_then(|l| {
            l.attach.logits.then(|| {
                LoRAParams::zeros(d, config.n_vocab, l.r, T::from_f64(l.alpha))
            })
        });
        Ok(ModelParams {
            w_tok: EmbeddingParams::zeros(config.n_vocab, d),
            w_pos: EmbeddingParams::zeros(config.n_context, d),
            blocks,
            ln_final: LayerNormParams::unit(d, eps),
            fc_logits: (!config.weight_tying).then(|| LinearParams::zeros(d, config.n_vocab)),
            lora_logits,
        })
    }

    /// Standard training initialization: weights ~ normal(0, 0.02), biases
    /// zero, layer norms at identity, adapter down-projections ~ normal(0,
    /// 0.02) with zero up-projections (adapters start as exact zero deltas).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid stddev");
        let mut fill = |m: &mut Matrix<T>| {
            for x in m.data_mut() {
                *x = T::from_f64(normal.sample(&mut rng));
            }
        };
        fill(&mut params.w_tok.w_emb);
        fill(&mut params.w_pos.w_emb);
        for b in &mut params.blocks {
            for h in &mut b.heads {
                fill(&mut h.q.w);
                fill(&mut h.k.w);
                fill(&mut h.v.w);
            }
            fill(&mut b.att_proj.w);
            fill(&mut b.fc_expand.w);
            fill(&mut b.fc_contract.w);
            if let Some(ad) = &mut b.adapters {
                for a in [&mut ad.q, &mut ad.k, &mut ad.v, &mut ad.att_proj, &mut ad.expand, &mut ad.contract]
                    .into_iter()
                    .flatten()
                {
                    fill(&mut a.d_mat); // u_mat stays zero
                }
            }
        }
        if let Some(fc) = &mut params.fc_logits {
            fill(&mut fc.w);
        }
        if let Some(a) = &mut params.lora_logits {
            fill(&mut a.d_mat);
        }
        Ok(params)
    }

    /// Fixture initialization for gradient verification: every tensor —
    /// including biases, layer-norm gains/offsets, and adapter
    /// up-projections — receives nonzero O(1)-scale values, so no gradient
    /// path is accidentally dormant. Not suitable for training.
    pub fn init_verification(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.4).expect("valid stddev");
        params.visit_mut(&mut |name, view| {
            let near_one = name.ends_with("ln1.w") || name.ends_with("ln2.w") || name == "ln_final.w";
            for x in view.data {
                let s = normal.sample(&mut rng);
                *x = T::from_f64(if near_one { 1.0 + 0.5 * s } else { s });
            }
        });
        Ok(params)
    }

    /// Attach fresh adapters to an adapter-free parameter set, per
    /// `config.lora` (which must be present). With a seed, down-projections
    /// are drawn from normal(0, 0.02); up-projections always start at zero,
    /// so the adapted model initially computes exactly the base function.
    pub fn attach_adapters(&mut self, config: &ModelConfig, seed: Option<u64>) -> Result<()> {
        config.validate()?;
        let Some(l) = &config.lora else {
            return Err(Error::Config("attach_adapters called without an adapter config".into()));
        };
        let has_any = self.blocks.iter().any(|b| b.adapters.is_some()) || self.lora_logits.is_some();
        if has_any {
            return Err(Error::Config("parameters already carry adapters".into()));
        }
        if self.blocks.len() != config.n_blocks {
            return Err(Error::Config(format!(
                "parameters have {} blocks but config says {}",
                self.blocks.len(),
                config.n_blocks
            )));
        }
        for b in &mut self.blocks {
            b.adapters = Some(block_adapters_zeros(config, l));
        }
        if l.attach.logits {
            self.lora_logits =
                Some(LoRAParams::zeros(config.d, config.n_vocab, l.r, T::from_f64(l.alpha)));
        }
        if let Some(seed) = seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 0.02).expect("valid stddev");
            self.visit_mut(&mut |name, view| {
                if name.ends_with(".d_mat") {
                    for x in view.data {
                        *x = T::from_f64(normal.sample(&mut rng));
                    }
                }
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Adapter gradients of one block (mirrors [`BlockAdapters`]).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockAdapterGrads<T: Scalar = f64> {
    pub q: Option<LoRAGrads<T>>,
    pub k: Option<LoRAGrads<T>>,
    pub v: Option<LoRAGrads<T>>,
    pub att_proj: Option<LoRAGrads<T>>,
    pub expand: Option<LoRAGrads<T>>,
    pub contract: Option<LoRAGrads<T>>,
}

/// One block's gradients (mirrors [`BlockParams`]).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T: Scalar = f64> {
    pub ln1: LayerNormGrads<T>,
    pub heads: Vec<AttentionHeadGrads<T>>,
    pub att_proj: LinearGrads<T>,
    pub ln2: LayerNormGrads<T>,
    pub fc_expand: LinearGrads<T>,
    pub fc_contract: LinearGrads<T>,
    pub adapters: Option<BlockAdapterGrads<T>>,
}

/// Gradients for the whole parameter tree (mirrors [`ModelParams`]).
/// Frozen tensors (the base weights under adapter fine-tuning) carry exact
/// zeros rather than being omitted, so the shape is optimizer-stable.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads<T: Scalar = f64> {
    pub w_tok: Matrix<T>,
    pub w_pos: Matrix<T>,
    pub blocks: Vec<BlockGrads<T>>,
    pub ln_final: LayerNormGrads<T>,
    pub fc_logits: Option<LinearGrads<T>>,
    pub lora_logits: Option<LoRAGrads<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Zero gradients shaped like `params` (batch-accumulation seed).
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        ModelGrads {
            w_tok: Matrix::zeros(params.w_tok.w_emb.rows(), params.w_tok.w_emb.cols()),
            w_pos: Matrix::zeros(params.w_pos.w_emb.rows(), params.w_pos.w_emb.cols()),
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    ln1: LayerNormGrads::zeros_like(&b.ln1),
                    heads: b.heads.iter().map(AttentionHeadGrads::zeros_like).collect(),
                    att_proj: LinearGrads::zeros_like(&b.att_proj),
                    ln2: LayerNormGrads::zeros_like(&b.ln2),
                    fc_expand: LinearGrads::zeros_like(&b.fc_expand),
                    fc_contract: LinearGrads::zeros_like(&b.fc_contract),
                    adapters: b.adapters.as_ref().map(|ad| BlockAdapterGrads {
                        q: ad.q.as_ref().map(LoRAGrads::zeros_like),
                        k: ad.k.as_ref().map(LoRAGrads::zeros_like),
                        v: ad.v.as_ref().map(LoRAGrads::zeros_like),
                        att_proj: ad.att_proj.as_ref().map(LoRAGrads::zeros_like),
                        expand: ad.expand.as_ref().map(LoRAGrads::zeros_like),
                        contract: ad.contract.as_ref().map(LoRAGrads::zeros_like),
                    }),
                })
                .collect(),
            ln_final: LayerNormGrads::zeros_like(&params.ln_final),
            fc_logits: params.fc_logits.as_ref().map(LinearGrads::zeros_like),
            lora_logits: params.lora_logits.as_ref().map(LoRAGrads::zeros_like),
        }
    }

    /// Elementwise `self += other` (batch accumulation by summation).
    pub fn accumulate(&mut self, other: &ModelGrads<T>) {
        let mut stream: Vec<Vec<T>> = Vec::new();
        other.visit(&mut |_, view| stream.push(view.data.to_vec()));
        let mut i = 0;
        self.visit_mut(&mut |_, view| {
            for (a, &b) in view.data.iter_mut().zip(&stream[i]) {
                *a += b;
            }
            i += 1;
        });
        assert_eq!(i, stream.len(), "gradient trees have different tensor counts");
    }

    /// Zero every base (non-adapter) tensor — the freeze contract.
    pub fn zero_base(&mut self) {
        self.visit_mut(&mut |name, view| {
            if !name_is_adapter(name) {
                for x in view.data {
                    *x = T::ZERO;
                }
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Named tensor traversal
// ---------------------------------------------------------------------------

/// Borrowed view of one named tensor (vectors are 1×n).
pub struct TensorView<'a, T> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [T],
}

/// Mutable view of one named tensor.
pub struct TensorViewMut<'a, T> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [T],
}

/// Whether a tensor name denotes an adapter (trainable under fine-tuning).
pub fn name_is_adapter(name: &str) -> bool {
    name.contains("lora")
}

// The four traversals below are written out explicitly rather than
// macro-generated: keeping the parameter and gradient walks textually
// parallel makes the name correspondence auditable at a glance, and a unit
// test pins the two streams to be identical.

impl<T: Scalar> ModelParams<T> {
    /// Visit every parameter tensor in a fixed, documented order:
    /// embeddings, then per block (ln1, heads q/k/v, att_proj, ln2,
    /// fc_expand, fc_contract, adapters), then final norm, logits head,
    /// logits adapter. This order is the checkpoint manifest order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, TensorView<'_, T>)) {
        fn mat<T: Scalar>(m: &Matrix<T>) -> TensorView<'_, T> {
            TensorView { rows: m.rows(), cols: m.cols(), data: m.data() }
        }
        fn vec<T: Scalar>(v: &[T]) -> TensorView<'_, T> {
            TensorView { rows: 1, cols: v.len(), data: v }
        }
        f("tok_emb.w", mat(&self.w_tok.w_emb));
        f("pos_emb.w", mat(&self.w_pos.w_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.ln1.w"), vec(&b.ln1.w));
            f(&format!("block{i}.ln1.b"), vec(&b.ln1.b));
            for (h, head) in b.heads.iter().enumerate() {
                f(&format!("block{i}.head{h}.q.w"), mat(&head.q.w));
                f(&format!("block{i}.head{h}.q.b"), vec(&head.q.b));
                f(&format!("block{i}.head{h}.k.w"), mat(&head.k.w));
                f(&format!("block{i}.head{h}.k.b"), vec(&head.k.b));
                f(&format!("block{i}.head{h}.v.w"), mat(&head.v.w));
                f(&format!("block{i}.head{h}.v.b"), vec(&head.v.b));
            }
            f(&format!("block{i}.att_proj.w"), mat(&b.att_proj.w));
            f(&format!("block{i}.att_proj.b"), vec(&b.att_proj.b));
            f(&format!("block{i}.ln2.w"), vec(&b.ln2.w));
            f(&format!("block{i}.ln2.b"), vec(&b.ln2.b));
            f(&format!("block{i}.fc_expand.w"), mat(&b.fc_expand.w));
            f(&format!("block{i}.fc_expand.b"), vec(&b.fc_expand.b));
            f(&format!("block{i}.fc_contract.w"), mat(&b.fc_contract.w));
            f(&format!("block{i}.fc_contract.b"), vec(&b.fc_contract.b));
            if let Some(ad) = &b.adapters {
                for (a, name) in [
                    (&ad.q, "lora_q"),
                    (&ad.k, "lora_k"),
                    (&ad.v, "lora_v"),
                    (&ad.att_proj, "lora_att_proj"),
                    (&ad.expand, "lora_expand"),
                    (&ad.contract, "lora_contract"),
                ] {
                    if let Some(a) = a {
                        f(&format!("block{i}.{name}.d_mat"), mat(&a.d_mat));
                        f(&format!("block{i}.{name}.u_mat"), mat(&a.u_mat));
                    }
                }
            }
        }
        f("ln_final.w", vec(&self.ln_final.w));
        f("ln_final.b", vec(&self.ln_final.b));
        if let Some(fc) = &self.fc_logits {
            f("fc_logits.w", mat(&fc.w));
            f("fc_logits.b", vec(&fc.b));
        }
        if let Some(a) = &self.lora_logits {
            f("lora_logits.d_mat", mat(&a.d_mat));
            f("lora_logits.u_mat", mat(&a.u_mat));
        }
    }

    /// Mutable traversal in exactly the [`visit`](Self::visit) order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorViewMut<'_, T>)) {
        fn mat<'a, T: Scalar>(m: &'a mut Matrix<T>) -> TensorViewMut<'a, T> {
            let (rows, cols) = (m.rows(), m.cols());
            TensorViewMut { rows, cols, data: m.data_mut() }
        }
        fn vec<T: Scalar>(v: &mut Vec<T>) -> TensorViewMut<'_, T> {
            TensorViewMut { rows: 1, cols: v.len(), data: v.as_mut_slice() }
        }
        f("tok_emb.w", mat(&mut self.w_tok.w_emb));
        f("pos_emb.w", mat(&mut self.w_pos.w_emb));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.ln1.w"), vec(&mut b.ln1.w));
            f(&format!("block{i}.ln1.b"), vec(&mut b.ln1.b));
            for (h, head) in b.heads.iter_mut().enumerate() {
                f(&format!("block{i}.head{h}.q.w"), mat(&mut head.q.w));
                f(&format!("block{i}.head{h}.q.b"), vec(&mut head.q.b));
                f(&format!("block{i}.head{h}.k.w"), mat(&mut head.k.w));
                f(&format!("block{i}.head{h}.k.b"), vec(&mut head.k.b));
                f(&format!("block{i}.head{h}.v.w"), mat(&mut head.v.w));
                f(&format!("block{i}.head{h}.v.b"), vec(&mut head.v.b));
            }
            f(&format!("block{i}.att_proj.w"), mat(&mut b.att_proj.w));
            f(&format!("block{i}.att_proj.b"), vec(&mut b.att_proj.b));
            f(&format!("block{i}.ln2.w"), vec(&mut b.ln2.w));
            f(&format!("block{i}.ln2.b"), vec(&mut b.ln2.b));
            f(&format!("block{i}.fc_expand.w"), mat(&mut b.fc_expand.w));
            f(&format!("block{i}.fc_expand.b"), vec(&mut b.fc_expand.b));
            f(&format!("block{i}.fc_contract.w"), mat(&mut b.fc_contract.w));
            f(&format!("block{i}.fc_contract.b"), vec(&mut b.fc_contract.b));
            if let Some(ad) = &mut b.adapters {
                for (a, name) in [
                    (&mut ad.q, "lora_q"),
                    (&mut ad.k, "lora_k"),
                    (&mut ad.v, "lora_v"),
                    (&mut ad.att_proj, "lora_att_proj"),
                    (&mut ad.expand, "lora_expand"),
                    (&mut ad.contract, "lora_contract"),
                ] {
                    if let Some(a) = a {
                        f(&format!("block{i}.{name}.d_mat"), mat(&mut a.d_mat));
                        f(&format!("block{i}.{name}.u_mat"), mat(&mut a.u_mat));
                    }
                }
            }
        }
        f("ln_final.w", vec(&mut self.ln_final.w));
        f("ln_final.b", vec(&mut self.ln_final.b));
        if let Some(fc) = &mut self.fc_logits {
            f("fc_logits.w", mat(&mut fc.w));
            f("fc_logits.b", vec(&mut fc.b));
        }
        if let Some(a) = &mut self.lora_logits {
            f("lora_logits.d_mat", mat(&mut a.d_mat));
            f("lora_logits.u_mat", mat(&mut a.u_mat));
        }
    }

    /// Total number of stored parameter elements.
    pub fn n_elements(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, view| n += view.data.len());
        n
    }
}

impl<T: Scalar> ModelGrads<T> {
    /// Traversal in the same order and with the same names as
    /// [`ModelParams::visit`].
    pub fn visit(&self, f: &mut dyn FnMut(&str, TensorView<'_, T>)) {
        fn mat<T: Scalar>(m: &Matrix<T>) -> TensorView<'_, T> {
            TensorView { rows: m.rows(), cols: m.cols(), data: m.data() }
        }
        fn vec<T: Scalar>(v: &[T]) -> TensorView<'_, T> {
            TensorView { rows: 1, cols: v.len(), data: v }
        }
        f("tok_emb.w", mat(&self.w_tok));
        f("pos_emb.w", mat(&self.w_pos));
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.ln1.w"), vec(&b.ln1.w));
            f(&format!("block{i}.ln1.b"), vec(&b.ln1.b));
            for (h, head) in b.heads.iter().enumerate() {
                f(&format!("block{i}.head{h}.q.w"), mat(&head.q.w));
                f(&format!("block{i}.head{h}.q.b"), vec(&head.q.b));
                f(&format!("block{i}.head{h}.k.w"), mat(&head.k.w));
                f(&format!("block{i}.head{h}.k.b"), vec(&head.k.b));
                f(&format!("block{i}.head{h}.v.w"), mat(&head.v.w));
                f(&format!("block{i}.head{h}.v.b"), vec(&head.v.b));
            }
            f(&format!("block{i}.att_proj.w"), mat(&b.att_proj.w));
            f(&format!("block{i}.att_proj.b"), vec(&b.att_proj.b));
            f(&format!("block{i}.ln2.w"), vec(&b.ln2.w));
            f(&format!("block{i}.ln2.b"), vec(&b.ln2.b));
            f(&format!("block{i}.fc_expand.w"), mat(&b.fc_expand.w));
            f(&format!("block{i}.fc_expand.b"), vec(&b.fc_expand.b));
            f(&format!("block{i}.fc_contract.w"), mat(&b.fc_contract.w));
            f(&format!("block{i}.fc_contract.b"), vec(&b.fc_contract.b));
            if let Some(ad) = &b.adapters {
                for (a, name) in [
                    (&ad.q, "lora_q"),
                    (&ad.k, "lora_k"),
                    (&ad.v, "lora_v"),
                    (&ad.att_proj, "lora_att_proj"),
                    (&ad.expand, "lora_expand"),
                    (&ad.contract, "lora_contract"),
                ] {
                    if let Some(a) = a {
                        f(&format!("block{i}.{name}.d_mat"), mat(&a.d_mat));
                        f(&format!("block{i}.{name}.u_mat"), mat(&a.u_mat));
                    }
                }
            }
        }
        f("ln_final.w", vec(&self.ln_final.w));
        f("ln_final.b", vec(&self.ln_final.b));
        if let Some(fc) = &self.fc_logits {
            f("fc_logits.w", mat(&fc.w));
            f("fc_logits.b", vec(&fc.b));
        }
        if let Some(a) = &self.lora_logits {
            f("lora_logits.d_mat", mat(&a.d_mat));
            f("lora_logits.u_mat", mat(&a.u_mat));
        }
    }

    /// Mutable traversal, same order as [`visit`](Self::visit).
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorViewMut<'_, T>)) {
        fn mat<'a, T: Scalar>(m: &'a mut Matrix<T>) -> TensorViewMut<'a, T> {
            let (rows, cols) = (m.rows(), m.cols());
            TensorViewMut { rows, cols, data: m.data_mut() }
        }
        fn vec<T: Scalar>(v: &mut Vec<T>) -> TensorViewMut<'_, T> {
            TensorViewMut { rows: 1, cols: v.len(), data: v.as_mut_slice() }
        }
        f("tok_emb.w", mat(&mut self.w_tok));
        f("pos_emb.w", mat(&mut self.w_pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.ln1.w"), vec(&mut b.ln1.w));
            f(&format!("block{i}.ln1.b"), vec(&mut b.ln1.b));
            for (h, head) in b.heads.iter_mut().enumerate() {
                f(&format!("block{i}.head{h}.q.w"), mat(&mut head.q.w));
                f(&format!("block{i}.head{h}.q.b"), vec(&mut head.q.b));
                f(&format!("block{i}.head{h}.k.w"), mat(&mut head.k.w));
                f(&format!("block{i}.head{h}.k.b"), vec(&mut head.k.b));
                f(&format!("block{i}.head{h}.v.w"), mat(&mut head.v.w));
                f(&format!("block{i}.head{h}.v.b"), vec(&mut head.v.b));
            }
            f(&format!("block{i}.att_proj.w"), mat(&mut b.att_proj.w));
            f(&format!("block{i}.att_proj.b"), vec(&mut b.att_proj.b));
            f(&format!("block{i}.ln2.w"), vec(&mut b.ln2.w));
            f(&format!("block{i}.ln2.b"), vec(&mut b.ln2.b));
            f(&format!("block{i}.fc_expand.w"), mat(&mut b.fc_expand.w));
            f(&format!("block{i}.fc_expand.b"), vec(&mut b.fc_expand.b));
            f(&format!("block{i}.fc_contract.w"), mat(&mut b.fc_contract.w));
            f(&format!("block{i}.fc_contract.b"), vec(&mut b.fc_contract.b));
            if let Some(ad) = &mut b.adapters {
                for (a, name) in [
                    (&mut ad.q, "lora_q"),
                    (&mut ad.k, "lora_k"),
                    (&mut ad.v, "lora_v"),
                    (&mut ad.att_proj, "lora_att_proj"),
                    (&mut ad.expand, "lora_expand"),
                    (&mut ad.contract, "lora_contract"),
                ] {
                    if let Some(a) = a {
                        f(&format!("block{i}.{name}.d_mat"), mat(&mut a.d_mat));
                        f(&format!("block{i}.{name}.u_mat"), mat(&mut a.u_mat));
                    }
                }
            }
        }
        f("ln_final.w", vec(&mut self.ln_final.w));
        f("ln_final.b", vec(&mut self.ln_final.b));
        if let Some(fc) = &mut self.fc_logits {
            f("fc_logits.w", mat(&mut fc.w));
            f("fc_logits.b", vec(&mut fc.b));
        }
        if let Some(a) = &mut self.lora_logits {
            f("lora_logits.d_mat", mat(&mut a.d_mat));
            f("lora_logits.u_mat", mat(&mut a.u_mat));
        }
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Per-block activation record.
#[derive(Clone, Debug)]
pub struct BlockTrace<T: Scalar = f64> {
    /// Block input (the residual stream entering the block).
    pub input: Matrix<T>,
    pub ln1: NormCache<T>,
    /// First layer-norm output — the input the attention projections see.
    pub ln1_out: Matrix<T>,
    pub head_caches: Vec<HeadCache<T>>,
    /// Concatenated head outputs — the input to the attention projection FC.
    pub mha_out: Matrix<T>,
    /// First residual sum (block input + projected attention).
    pub res1: Matrix<T>,
    pub ln2: NormCache<T>,
    /// Second layer-norm output — the input to the expanding FC.
    pub ln2_out: Matrix<T>,
    /// Pre-activation (expanded) features.
    pub pre_act: Matrix<T>,
    /// Post-activation features — the input to the contracting FC.
    pub act_out: Matrix<T>,
}

/// Complete activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar = f64> {
    pub tokens: Vec<usize>,
    /// Sum of token and position embeddings.
    pub a1: Matrix<T>,
    pub blocks: Vec<BlockTrace<T>>,
    pub ln_final: NormCache<T>,
    /// Final layer-norm output — the input to the logits projection.
    pub ln_final_out: Matrix<T>,
    pub logits: Matrix<T>,
    /// Row-softmaxed logits.
    pub y_pred: Matrix<T>,
}

/// Compute the logits projection: the dense head (or the transposed token
/// table under weight tying) plus the logits adapter when attached.
pub(crate) fn logits_forward<T: Scalar>(a11: &Matrix<T>, params: &ModelParams<T>) -> Matrix<T> {
    let mut logits = match &params.fc_logits {
        Some(fc) => linear_forward(a11, fc),
        None => a11.matmul(&params.w_tok.w_emb.transpose()),
    };
    if let Some(adapter) = &params.lora_logits {
        logits.add_assign(&lora_forward(a11, adapter));
    }
    logits
}

/// Run the full forward pass, recording every activation.
pub fn model_forward<T: Scalar>(
    tokens: &[usize],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<ForwardTrace<T>> {
    let n_t = tokens.len();
    if n_t == 0 {
        return Err(Error::Invalid("token sequence must not be empty".into()));
    }
    if n_t > config.n_context {
        return Err(Error::Invalid(format!(
            "sequence of {n_t} tokens exceeds the context window of {}",
            config.n_context
        )));
    }

    let tok = embedding_forward(tokens, &params.w_tok)?;
    let positions: Vec<usize> = (0..n_t).collect();
    let pos = embedding_forward(&positions, &params.w_pos)?;
    let a1 = tok.add(&pos);

    let mut stream = a1.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let input = stream;
        let (ln1_out, ln1) = layernorm_forward(&input, &b.ln1);

        // Fused adapter contributions to the stacked q/k/v feature maps.
        let ad = b.adapters.as_ref();
        let extra_q = ad.and_then(|a| a.q.as_ref()).map(|a| lora_forward(&ln1_out, a));
        let extra_k = ad.and_then(|a| a.k.as_ref()).map(|a| lora_forward(&ln1_out, a));
        let extra_v = ad.and_then(|a| a.v.as_ref()).map(|a| lora_forward(&ln1_out, a));

        let mut head_outs = Vec::with_capacity(b.heads.len());
        let mut head_caches = Vec::with_capacity(b.heads.len());
        for (h, head) in b.heads.iter().enumerate() {
            let mut q = linear_forward(&ln1_out, &head.q);
            let mut k = linear_forward(&ln1_out, &head.k);
            let mut v = linear_forward(&ln1_out, &head.v);
            if let Some(eq) = &extra_q {
                q.add_assign(&eq.slice_cols(h * config.d_rho, config.d_rho));
            }
            if let Some(ek) = &extra_k {
                k.add_assign(&ek.slice_cols(h * config.d_rho, config.d_rho));
            }
            if let Some(ev) = &extra_v {
                v.add_assign(&ev.slice_cols(h * config.d_h, config.d_h));
            }
            let (out, cache) = attention_from_qkv(&ln1_out, q, k, v, true);
            head_outs.push(out);
            head_caches.push(cache);
        }
        let refs: Vec<&Matrix<T>> = head_outs.iter().collect();
        let mha_out = Matrix::concat_cols(&refs);

        let mut a4 = linear_forward(&mha_out, &b.att_proj);
        if let Some(a) = ad.and_then(|a| a.att_proj.as_ref()) {
            a4.add_assign(&lora_forward(&mha_out, a));
        }
        let res1 = input.add(&a4);

        let (ln2_out, ln2) = layernorm_forward(&res1, &b.ln2);
        let mut pre_act = linear_forward(&ln2_out, &b.fc_expand);
        if let Some(a) = ad.and_then(|a| a.expand.as_ref()) {
            pre_act.add_assign(&lora_forward(&ln2_out, a));
        }
        let (act_out, pre_act_cache) = activation_forward(&pre_act, config.activation);
        let mut a9 = linear_forward(&act_out, &b.fc_contract);
        if let Some(a) = ad.and_then(|a| a.contract.as_ref()) {
            a9.add_assign(&lora_forward(&act_out, a));
        }
        stream = res1.add(&a9);

        blocks.push(BlockTrace {
            input,
            ln1,
            ln1_out,
            head_caches,
            mha_out,
            res1,
            ln2,
            ln2_out,
            pre_act: pre_act_cache,
            act_out,
        });
    }

    let (ln_final_out, ln_final) = layernorm_forward(&stream, &params.ln_final);
    let logits = logits_forward(&ln_final_out, params);
    let y_pred = softmax_rows(&logits, None);

    Ok(ForwardTrace { tokens: tokens.to_vec(), a1, blocks, ln_final, ln_final_out, logits, y_pred })
}

/// Mean cross-entropy of a recorded forward pass over the contributing
/// (non-`None`) target positions.
pub fn model_loss<T: Scalar>(trace: &ForwardTrace<T>, targets: &[Option<usize>]) -> Result<T> {
    let n_contrib = crate::layers::loss::check_targets(targets, &trace.y_pred)?;
    let mut sum = T::ZERO;
    for (t, target) in targets.iter().enumerate() {
        if let Some(j) = target {
            sum += trace.y_pred[(t, *j)].ln();
        }
    }
    Ok(-sum / T::from_f64(n_contrib as f64))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Run the complete backward sweep for the cross-entropy loss of `targets`
/// on a recorded forward trace.
///
/// Skip connections dispatch the incoming signal to both of their inputs
/// (duplication, then accumulation with the residual term first). Under
/// adapter fine-tuning every base gradient is zeroed before returning.
pub fn model_backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    targets: &[Option<usize>],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<ModelGrads<T>> {
    assert_eq!(
        params.blocks.len(),
        trace.blocks.len(),
        "trace has {} blocks but params have {}",
        trace.blocks.len(),
        params.blocks.len()
    );
    let n_contrib = targets.iter().flatten().count();
    let delta12 = loss_backward(&trace.y_pred, targets, n_contrib)?;
    let mut grads = ModelGrads::zeros_like(params);

    // Logits head (+ adapter), then final norm.
    let mut delta11 = match &params.fc_logits {
        Some(fc) => {
            let (din, g) = linear_backward(&delta12, &trace.ln_final_out, fc);
            grads.fc_logits = Some(g);
            din
        }
        None => {
            // Tied head: logits = a11·w_tokᵗ, so the shared table collects
            // Δ12ᵗ·a11 and the downstream signal is Δ12·w_tok.
            grads.w_tok.add_assign(&delta12.transpose().matmul(&trace.ln_final_out));
            delta12.matmul(&params.w_tok.w_emb)
        }
    };
    if let Some(adapter) = &params.lora_logits {
        let (extra, g) = lora_backward(&delta12, &trace.ln_final_out, adapter);
        grads.lora_logits = Some(g);
        delta11.add_assign(&extra);
    }
    let (delta10, ln_final_grads) = layernorm_backward(&delta11, &trace.ln_final, &params.ln_final);
    grads.ln_final = ln_final_grads;

    // Blocks in reverse. `delta` carries the signal at each block's output.
    let mut delta = delta10;
    for (bi, (b, t)) in params.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        let ad = b.adapters.as_ref();
        let g_block = &mut grads.blocks[bi];

        // Second skip/add: block_out = res1 + mlp_out. Both branches receive
        // the full signal; the residual copy is consumed below.
        let (mut delta8, contract_grads) = linear_backward(&delta, &t.act_out, &b.fc_contract);
        g_block.fc_contract = contract_grads;
        if let Some(a) = ad.and_then(|a| a.contract.as_ref()) {
            let (extra, g) = lora_backward(&delta, &t.act_out, a);
            g_block.adapters.as_mut().unwrap().contract = Some(g);
            delta8.add_assign(&extra);
        }
        let delta7 = activation_backward(&delta8, &t.pre_act, config.activation);
        let (mut delta6, expand_grads) = linear_backward(&delta7, &t.ln2_out, &b.fc_expand);
        g_block.fc_expand = expand_grads;
        if let Some(a) = ad.and_then(|a| a.expand.as_ref()) {
            let (extra, g) = lora_backward(&delta7, &t.ln2_out, a);
            g_block.adapters.as_mut().unwrap().expand = Some(g);
            delta6.add_assign(&extra);
        }
        let (delta5_mlp, ln2_grads) = layernorm_backward(&delta6, &t.ln2, &b.ln2);
        g_block.ln2 = ln2_grads;
        let delta5 = delta.add(&delta5_mlp); // residual term first

        // First skip/add: res1 = block_in + att_out.
        let (mut delta3, att_proj_grads) = linear_backward(&delta5, &t.mha_out, &b.att_proj);
        g_block.att_proj = att_proj_grads;
        if let Some(a) = ad.and_then(|a| a.att_proj.as_ref()) {
            let (extra, g) = lora_backward(&delta5, &t.mha_out, a);
            g_block.adapters.as_mut().unwrap().att_proj = Some(g);
            delta3.add_assign(&extra);
        }

        // Heads: slice the signal, run the attention core, then the three
        // projections. Fused adapters see the concatenated per-head signals.
        let mut delta2 = Matrix::zeros(delta3.rows(), config.d);
        let mut dq_parts = Vec::with_capacity(b.heads.len());
        let mut dk_parts = Vec::with_capacity(b.heads.len());
        let mut dv_parts = Vec::with_capacity(b.heads.len());
        for (h, head) in b.heads.iter().enumerate() {
            let block_delta = delta3.slice_cols(h * config.d_h, config.d_h);
            let cache = &t.head_caches[h];
            let (dl_dq, dl_dk, dl_dv) = attention_core_backward(&block_delta, cache);

            let (din_q, gq) = linear_backward(&dl_dq, &t.ln1_out, &head.q);
            let (din_k, mut gk) = linear_backward(&dl_dk, &t.ln1_out, &head.k);
            for x in &mut gk.b {
                *x = T::ZERO; // keys bias gradient is identically zero
            }
            let (din_v, gv) = linear_backward(&dl_dv, &t.ln1_out, &head.v);
            g_block.heads[h] = AttentionHeadGrads { q: gq, k: gk, v: gv };
            delta2.add_assign(&din_v);
            delta2.add_assign(&din_q);
            delta2.add_assign(&din_k);
            dq_parts.push(dl_dq);
            dk_parts.push(dl_dk);
            dv_parts.push(dl_dv);
        }
        for (maybe_adapter, parts, slot) in [
            (ad.and_then(|a| a.q.as_ref()), &dq_parts, 0usize),
            (ad.and_then(|a| a.k.as_ref()), &dk_parts, 1),
            (ad.and_then(|a| a.v.as_ref()), &dv_parts, 2),
        ] {
            if let Some(a) = maybe_adapter {
                let refs: Vec<&Matrix<T>> = parts.iter().collect();
                let fused = Matrix::concat_cols(&refs);
                let (extra, g) = lora_backward(&fused, &t.ln1_out, a);
                let slots = g_block.adapters.as_mut().unwrap();
                match slot {
                    0 => slots.q = Some(g),
                    1 => slots.k = Some(g),
                    _ => slots.v = Some(g),
                }
                delta2.add_assign(&extra);
            }
        }
        let (delta1_attn, ln1_grads) = layernorm_backward(&delta2, &t.ln1, &b.ln1);
        g_block.ln1 = ln1_grads;
        delta = delta5.add(&delta1_attn); // residual term first
    }

    // Embedding tables: the error flow stops here.
    grads.w_pos = {
        let positions: Vec<usize> = (0..trace.tokens.len()).collect();
        embedding_backward(&positions, &delta, config.n_context)?
    };
    let tok_grad = embedding_backward(&trace.tokens, &delta, config.n_vocab)?;
    grads.w_tok.add_assign(&tok_grad); // tied logits contribution added above

    if config.lora.is_some() {
        grads.zero_base();
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Adapter merging
// ---------------------------------------------------------------------------

/// Fold every adapter into its base layer (`w += α·d·u`, sliced per head for
/// the fused q/k/v adapters) and return an adapter-free parameter set. The
/// merged model computes the same function as the two-path original.
pub fn merge_lora<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> (ModelParams<T>, ModelConfig) {
    let mut merged = params.clone();
    let mut merged_config = config.clone();
    merged_config.lora = None;

    for b in &mut merged.blocks {
        let Some(ad) = b.adapters.take() else { continue };
        if let Some(a) = &ad.q {
            let full = a.d_mat.matmul(&a.u_mat).scale(a.alpha);
            for (h, head) in b.heads.iter_mut().enumerate() {
                head.q.w.add_assign(&full.slice_cols(h * config.d_rho, config.d_rho));
            }
        }
        if let Some(a) = &ad.k {
            let full = a.d_mat.matmul(&a.u_mat).scale(a.alpha);
            for (h, head) in b.heads.iter_mut().enumerate() {
                head.k.w.add_assign(&full.slice_cols(h * config.d_rho, config.d_rho));
            }
        }
        if let Some(a) = &ad.v {
            let full = a.d_mat.matmul(&a.u_mat).scale(a.alpha);
            for (h, head) in b.heads.iter_mut().enumerate() {
                head.v.w.add_assign(&full.slice_cols(h * config.d_h, config.d_h));
            }
        }
        if let Some(a) = &ad.att_proj {
            b.att_proj.w.add_assign(&a.d_mat.matmul(&a.u_mat).scale(a.alpha));
        }
        if let Some(a) = &ad.expand {
            b.fc_expand.w.add_assign(&a.d_mat.matmul(&a.u_mat).scale(a.alpha));
        }
        if let Some(a) = &ad.contract {
            b.fc_contract.w.add_assign(&a.d_mat.matmul(&a.u_mat).scale(a.alpha));
        }
    }
    if let Some(a) = merged.lora_logits.take() {
        let full = a.d_mat.matmul(&a.u_mat).scale(a.alpha);
        match &mut merged.fc_logits {
            Some(fc) => fc.w.add_assign(&full),
            // Tied head: folding into the shared table would corrupt the
            // embedding path, so the merged model unties — the logits head
            // becomes an explicit dense layer (zero bias) holding the
            // transposed table plus the adapter delta.
            None => {
                let mut fc = LinearParams::zeros(config.d, config.n_vocab);
                fc.w = merged.w_tok.w_emb.transpose();
                fc.w.add_assign(&full);
                merged.fc_logits = Some(fc);
                merged_config.weight_tying = false;
            }
        }
    }
    (merged, merged_config)
}

#[cfg(test)]
mod tests;
