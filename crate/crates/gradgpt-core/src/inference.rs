//! Autoregressive generation with per-head key/value caching.
//!
//! Decoding a new token only needs three new feature-map rows per head —
//! the query, key, and value of the newest position — because every other
//! per-token operation (layer norms, the FC sandwich, skip connections) acts
//! row-locally, and attention only reads *past* keys and values, which never
//! change once computed. [`KVCache`] stores those past rows per block and
//! head; [`decode_step`] pushes one token through the whole stack touching
//! nothing but single-row matrices and the cached stores, so the work per
//! step is O(cache length) vector–matrix products per head and no
//! `n_T × n_T` score matrix is ever materialized.
//!
//! [`prefill`] seeds the cache by running the ordinary full forward pass
//! once; [`generate`] composes the two with a deterministic, seeded sampler.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::activation::activation_forward;
use crate::layers::linear::linear_forward;
use crate::layers::lora::lora_forward;
use crate::layers::norm::layernorm_forward;
use crate::model::{logits_forward, model_forward, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{dot, softmax_rows, Matrix};

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// Append-only key/value rows for one attention head.
///
/// Flat row-major storage; both vectors are reserved to full context
/// capacity at construction so appends during decoding never reallocate.
#[derive(Clone, Debug)]
struct HeadStore<T: Scalar> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Cached key/value feature maps for one generation session.
///
/// Per block and head the cache holds every past position's key row (width
/// `d_rho`) and value row (width `d_h`). All stores always share the same
/// length, the length never exceeds `n_context`, and row `t` equals the
/// feature map a full forward pass would compute for position `t` — the
/// invariants the equivalence tests pin down.
///
/// A cache belongs to a single generation session. Independent sessions may
/// run concurrently with their own caches; a cache is never shared between
/// threads mid-step.
#[derive(Clone, Debug)]
pub struct KVCache<T: Scalar = f64> {
    /// `blocks[l][h]` is the store for head `h` of block `l`.
    blocks: Vec<Vec<HeadStore<T>>>,
    len: usize,
    d_rho: usize,
    d_h: usize,
    n_context: usize,
}

impl<T: Scalar> KVCache<T> {
    /// An empty cache sized for `config`, with capacity for a full context
    /// window reserved up front.
    pub fn new(config: &ModelConfig) -> Self {
        let blocks = (0..config.n_blocks)
            .map(|_| {
                (0..config.n_h)
                    .map(|_| HeadStore {
                        k: Vec::with_capacity(config.n_context * config.d_rho),
                        v: Vec::with_capacity(config.n_context * config.d_h),
                    })
                    .collect()
            })
            .collect();
        KVCache {
            blocks,
            len: 0,
            d_rho: config.d_rho,
            d_h: config.d_h,
            n_context: config.n_context,
        }
    }

    /// Number of token positions cached so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_heads(&self) -> usize {
        self.blocks.first().map_or(0, Vec::len)
    }

    /// Key row of position `t` for head `h` of block `block` (width `d_rho`).
    pub fn k_row(&self, block: usize, head: usize, t: usize) -> &[T] {
        assert!(t < self.len, "cache row {t} out of range for length {}", self.len);
        &self.blocks[block][head].k[t * self.d_rho..(t + 1) * self.d_rho]
    }

    /// Value row of position `t` for head `h` of block `block` (width `d_h`).
    pub fn v_row(&self, block: usize, head: usize, t: usize) -> &[T] {
        assert!(t < self.len, "cache row {t} out of range for length {}", self.len);
        &self.blocks[block][head].v[t * self.d_h..(t + 1) * self.d_h]
    }
}

// ---------------------------------------------------------------------------
// Prefill and single-token decode
// ---------------------------------------------------------------------------

/// Run the ordinary full forward pass over `tokens`, store every head's key
/// and value rows, and return the cache together with the logits of the
/// final position.
pub fn prefill<T: Scalar>(
    tokens: &[usize],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(KVCache<T>, Vec<T>)> {
    let trace = model_forward(tokens, params, config)?;
    let mut cache = KVCache::new(config);
    for (l, block) in trace.blocks.iter().enumerate() {
        for (h, head) in block.head_caches.iter().enumerate() {
            let store = &mut cache.blocks[l][h];
            store.k.extend_from_slice(head.k.data());
            store.v.extend_from_slice(head.v.data());
        }
    }
    cache.len = tokens.len();
    Ok((cache, trace.logits.row(tokens.len() - 1).to_vec()))
}

/// Push one new token through the model using the cache, append its key and
/// value rows, and return the next-token logits.
///
/// Only single-row matrices are created: the newest position's query row
/// attends over the cached keys as a vector–matrix product, and every other
/// layer is applied to the one new row. The result is exactly what a full
/// forward pass over the extended sequence would produce for the final
/// position, because layer norms, the FC layers, and skip connections are
/// all per-row and past key/value rows are frozen by causality.
pub fn decode_step<T: Scalar>(
    token: usize,
    cache: &mut KVCache<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Vec<T>> {
    let pos = cache.len;
    if pos + 1 > config.n_context {
        return Err(Error::Invalid(format!(
            "context window of {} is full: {pos} positions already cached",
            config.n_context
        )));
    }
    if token >= config.n_vocab {
        return Err(Error::TokenOutOfRange { id: token, position: pos, n_vocab: config.n_vocab });
    }
    assert_eq!(
        cache.blocks.len(),
        params.blocks.len(),
        "cache built for {} blocks but model has {}",
        cache.blocks.len(),
        params.blocks.len()
    );
    assert!(
        cache.d_rho == config.d_rho && cache.d_h == config.d_h && cache.n_context == config.n_context,
        "cache geometry (d_rho {}, d_h {}, n_context {}) does not match the configuration",
        cache.d_rho,
        cache.d_h,
        cache.n_context
    );

    // Embedding row for (token, position).
    let d = config.d;
    let mut x = Matrix::zeros(1, d);
    {
        let tok_row = params.w_tok.w_emb.row(token);
        let pos_row = params.w_pos.w_emb.row(pos);
        let out = x.row_mut(0);
        for j in 0..d {
            out[j] = tok_row[j] + pos_row[j];
        }
    }

    let inv_sqrt = T::from_f64(1.0 / (config.d_rho as f64).sqrt());
    for (l, b) in params.blocks.iter().enumerate() {
        let (ln1_row, _) = layernorm_forward(&x, &b.ln1);

        let ad = b.adapters.as_ref();
        let extra_q = ad.and_then(|a| a.q.as_ref()).map(|a| lora_forward(&ln1_row, a));
        let extra_k = ad.and_then(|a| a.k.as_ref()).map(|a| lora_forward(&ln1_row, a));
        let extra_v = ad.and_then(|a| a.v.as_ref()).map(|a| lora_forward(&ln1_row, a));

        let mut head_outs = Vec::with_capacity(b.heads.len());
        for (h, head) in b.heads.iter().enumerate() {
            let mut q = linear_forward(&ln1_row, &head.q);
            let mut k = linear_forward(&ln1_row, &head.k);
            let mut v = linear_forward(&ln1_row, &head.v);
            if let Some(eq) = &extra_q {
                q.add_assign(&eq.slice_cols(h * config.d_rho, config.d_rho));
            }
            if let Some(ek) = &extra_k {
                k.add_assign(&ek.slice_cols(h * config.d_rho, config.d_rho));
            }
            if let Some(ev) = &extra_v {
                v.add_assign(&ev.slice_cols(h * config.d_h, config.d_h));
            }

            let store = &mut cache.blocks[l][h];
            store.k.extend_from_slice(single_row_data(&k));
            store.v.extend_from_slice(single_row_data(&v));
            let n_rows = pos + 1;

            // Scores of the newest query against every cached key: one row,
            // every position visible to the newest token.
            let mut scores = Vec::with_capacity(n_rows);
            for t in 0..n_rows {
                let k_t = &store.k[t * config.d_rho..(t + 1) * config.d_rho];
                scores.push(dot(q.row(0), k_t) * inv_sqrt);
            }
            let rho = softmax_rows(&Matrix::row_matrix(scores), None);

            // Mix the cached value rows with the attention weights.
            let mut out = Matrix::zeros(1, config.d_h);
            {
                let out_row = out.row_mut(0);
                for t in 0..n_rows {
                    let w = rho[(0, t)];
                    let v_t = &store.v[t * config.d_h..(t + 1) * config.d_h];
                    for j in 0..config.d_h {
                        out_row[j] += w * v_t[j];
                    }
                }
            }
            head_outs.push(out);
        }
        let refs: Vec<&Matrix<T>> = head_outs.iter().collect();
        let mha_row = Matrix::concat_cols(&refs);

        let mut a4 = linear_forward(&mha_row, &b.att_proj);
        if let Some(a) = ad.and_then(|a| a.att_proj.as_ref()) {
            a4.add_assign(&lora_forward(&mha_row, a));
        }
        let res1 = x.add(&a4);

        let (ln2_row, _) = layernorm_forward(&res1, &b.ln2);
        let mut pre_act = linear_forward(&ln2_row, &b.fc_expand);
        if let Some(a) = ad.and_then(|a| a.expand.as_ref()) {
            pre_act.add_assign(&lora_forward(&ln2_row, a));
        }
        let (act_out, _) = activation_forward(&pre_act, config.activation);
        let mut a9 = linear_forward(&act_out, &b.fc_contract);
        if let Some(a) = ad.and_then(|a| a.contract.as_ref()) {
            a9.add_assign(&lora_forward(&act_out, a));
        }
        x = res1.add(&a9);
    }
    cache.len = pos + 1;

    let (ln_final_row, _) = layernorm_forward(&x, &params.ln_final);
    let logits = logits_forward(&ln_final_row, params);
    Ok(logits.row(0).to_vec())
}

/// View a single-row matrix's storage as a slice (helper for cache appends).
fn single_row_data<T: Scalar>(m: &Matrix<T>) -> &[T] {
    debug_assert_eq!(m.rows(), 1);
    m.data()
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// How to turn a logits row into the next token.
#[derive(Clone, Debug, PartialEq)]
pub enum SamplerStrategy {
    /// Argmax, ties broken toward the lowest index. Fully deterministic.
    Greedy,
    /// Divide logits by the temperature, softmax, sample. Requires τ > 0.
    Temperature(f64),
    /// Softmax, keep only the `k` largest probabilities, renormalize,
    /// sample. Requires 1 ≤ k ≤ n_vocab.
    TopK(usize),
}

/// A sampling strategy plus the seed that makes it reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSpec {
    pub strategy: SamplerStrategy,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn greedy() -> Self {
        SamplerSpec { strategy: SamplerStrategy::Greedy, seed: 0 }
    }

    pub fn temperature(tau: f64, seed: u64) -> Self {
        SamplerSpec { strategy: SamplerStrategy::Temperature(tau), seed }
    }

    pub fn top_k(k: usize, seed: u64) -> Self {
        SamplerSpec { strategy: SamplerStrategy::TopK(k), seed }
    }

    /// Check the strategy's own invariants against a vocabulary size.
    pub fn validate(&self, n_vocab: usize) -> Result<()> {
        match self.strategy {
            SamplerStrategy::Greedy => Ok(()),
            SamplerStrategy::Temperature(tau) => {
                if tau.is_finite() && tau > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Invalid(format!("temperature must be positive and finite, got {tau}")))
                }
            }
            SamplerStrategy::TopK(k) => {
                if (1..=n_vocab).contains(&k) {
                    Ok(())
                } else {
                    Err(Error::Invalid(format!(
                        "top-k must satisfy 1 <= k <= n_vocab ({n_vocab}), got {k}"
                    )))
                }
            }
        }
    }
}

/// Pick the next token from a logits row under the given strategy.
///
/// All sampling arithmetic runs in f64 regardless of the model's element
/// type. The categorical draw consumes exactly one uniform variate from the
/// generator per sampled token.
pub fn sample_token<T: Scalar>(
    logits: &[T],
    strategy: &SamplerStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let l: Vec<f64> = logits.iter().map(|x| x.to_f64()).collect();
    if l.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("logits contain a non-finite value".into()));
    }
    if l.is_empty() {
        return Err(Error::Invalid("cannot sample from an empty logits row".into()));
    }
    match *strategy {
        SamplerStrategy::Greedy => {
            let mut best = 0usize;
            for (i, &x) in l.iter().enumerate().skip(1) {
                if x > l[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        SamplerStrategy::Temperature(tau) => {
            let scaled: Vec<f64> = l.iter().map(|x| x / tau).collect();
            let p = stable_softmax(&scaled);
            Ok(categorical_draw(&p, rng))
        }
        SamplerStrategy::TopK(k) => {
            let mut p = stable_softmax(&l);
            let mut order: Vec<usize> = (0..p.len()).collect();
            // Largest probability first; equal probabilities keep index order
            // so the kept set is deterministic.
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            let mut keep = vec![false; p.len()];
            for &i in order.iter().take(k) {
                keep[i] = true;
            }
            let mut kept_sum = 0.0;
            for (i, pi) in p.iter_mut().enumerate() {
                if keep[i] {
                    kept_sum += *pi;
                } else {
                    *pi = 0.0;
                }
            }
            for pi in &mut p {
                *pi /= kept_sum;
            }
            Ok(categorical_draw(&p, rng))
        }
    }
}

/// Numerically stable softmax of one f64 row.
fn stable_softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    for x in &mut e {
        *x /= sum;
    }
    e
}

/// Inverse-CDF draw over a probability vector; entries with zero mass are
/// never returned.
fn categorical_draw(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_live = 0usize;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            cum += pi;
            last_live = i;
            if u < cum {
                return i;
            }
        }
    }
    // Rounding can leave cum slightly below 1; fall back to the final live
    // entry.
    last_live
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Prefill on the prompt, then autoregressively sample `n_new` tokens.
///
/// Returns the prompt followed by the generated tokens. The final sampled
/// token is never pushed back through the model, so the cache peaks at
/// `prompt.len() + n_new − 1` rows — which is why the precondition is
/// `prompt.len() + n_new ≤ n_context`.
pub fn generate<T: Scalar>(
    prompt: &[usize],
    n_new: usize,
    sampler: &SamplerSpec,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Vec<usize>> {
    if prompt.len() + n_new > config.n_context {
        return Err(Error::Invalid(format!(
            "prompt of {} tokens plus {n_new} new tokens exceeds the context window of {}",
            prompt.len(),
            config.n_context
        )));
    }
    sampler.validate(config.n_vocab)?;

    let (mut cache, mut logits) = prefill(prompt, params, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut out = prompt.to_vec();
    for i in 0..n_new {
        let next = sample_token(&logits, &sampler.strategy, &mut rng)?;
        out.push(next);
        if i + 1 < n_new {
            logits = decode_step(next, &mut cache, params, config)?;
        }
    }
    Ok(out)
}
