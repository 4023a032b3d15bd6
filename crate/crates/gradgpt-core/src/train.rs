//! Corpus handling, optimizers, and the training loop.
//!
//! The gradient math lives in [`crate::model`]; this module supplies the
//! plumbing around it. Sequences are sampled as contiguous windows walked by
//! a deterministic coprime stride (reproducibility over i.i.d. sampling),
//! batch gradients are accumulated by summation, and one optimizer step is
//! applied per batch. Plain SGD is the default optimizer so the hand-derived
//! gradients stay the star; AdamW is available for faster desk-scale runs.
//!
//! Under adapter fine-tuning both optimizers skip base tensors entirely —
//! zeroed gradients alone would not be enough, because AdamW's decoupled
//! weight decay mutates parameters even where the gradient vanishes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    model_backward, model_forward, model_loss, name_is_adapter, ModelConfig, ModelGrads,
    ModelParams,
};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Vocabulary and corpus
// ---------------------------------------------------------------------------

/// Which token alphabet to build from a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabKind {
    /// Identity byte mapping, vocabulary size 256. Works on any input.
    Bytes,
    /// Distinct characters inferred from the corpus, sorted by code point.
    Chars,
}

/// Token ↔ text mapping.
#[derive(Clone, Debug, PartialEq)]
pub enum Vocab {
    Bytes,
    Chars {
        /// Sorted, deduplicated code points; token id = index.
        alphabet: Vec<char>,
    },
}

impl Vocab {
    pub fn n_vocab(&self) -> usize {
        match self {
            Vocab::Bytes => 256,
            Vocab::Chars { alphabet } => alphabet.len(),
        }
    }

    /// Encode text. Fails only for characters outside a char vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self {
            Vocab::Bytes => Ok(text.bytes().map(usize::from).collect()),
            Vocab::Chars { alphabet } => text
                .chars()
                .map(|c| {
                    alphabet.binary_search(&c).map_err(|_| {
                        Error::Invalid(format!("character {c:?} is not in the corpus alphabet"))
                    })
                })
                .collect(),
        }
    }

    /// Decode tokens back to text. Byte vocabularies decode lossily (an
    /// arbitrary generated byte string need not be valid UTF-8); character
    /// vocabularies reject out-of-range ids.
    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        match self {
            Vocab::Bytes => {
                let mut bytes = Vec::with_capacity(tokens.len());
                for (i, &t) in tokens.iter().enumerate() {
                    if t >= 256 {
                        return Err(Error::Invalid(format!(
                            "token {t} at position {i} is not a byte"
                        )));
                    }
                    bytes.push(t as u8);
                }
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            Vocab::Chars { alphabet } => {
                let mut out = String::with_capacity(tokens.len());
                for (i, &t) in tokens.iter().enumerate() {
                    match alphabet.get(t) {
                        Some(&c) => out.push(c),
                        None => {
                            return Err(Error::Invalid(format!(
                                "token {t} at position {i} out of range for alphabet of {}",
                                alphabet.len()
                            )))
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// A tokenized corpus and the vocabulary inferred from it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub tokens: Vec<usize>,
}

impl Corpus {
    /// Tokenize raw bytes. A char vocabulary requires valid UTF-8.
    pub fn from_bytes(raw: &[u8], kind: VocabKind) -> Result<Corpus> {
        match kind {
            VocabKind::Bytes => Ok(Corpus {
                vocab: Vocab::Bytes,
                tokens: raw.iter().map(|&b| usize::from(b)).collect(),
            }),
            VocabKind::Chars => {
                let text = std::str::from_utf8(raw).map_err(|e| {
                    Error::Invalid(format!("char vocabulary needs UTF-8 input: {e}"))
                })?;
                Ok(Self::from_text(text, VocabKind::Chars))
            }
        }
    }

    /// Tokenize text. For [`VocabKind::Chars`] the alphabet is inferred from
    /// the text itself, so encoding cannot fail.
    pub fn from_text(text: &str, kind: VocabKind) -> Corpus {
        let vocab = match kind {
            VocabKind::Bytes => Vocab::Bytes,
            VocabKind::Chars => {
                let mut alphabet: Vec<char> = text.chars().collect();
                alphabet.sort_unstable();
                alphabet.dedup();
                Vocab::Chars { alphabet }
            }
        };
        let tokens = vocab.encode(text).expect("corpus must encode under its own alphabet");
        Corpus { vocab, tokens }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }
}

// ---------------------------------------------------------------------------
// Window sampling
// ---------------------------------------------------------------------------

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Deterministic walk over all `seq_len + 1`-token windows of a corpus.
///
/// The start offsets follow `phase + j·stride (mod n_starts)` with a stride
/// coprime to the number of starts, so a full cycle visits every window
/// exactly once while consecutive samples land far apart. The phase is
/// seeded; runs with the same seed draw identical window sequences.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    n_starts: usize,
    stride: usize,
    cursor: usize,
}

impl WindowSampler {
    pub fn new(n_tokens: usize, seq_len: usize, seed: u64) -> Result<WindowSampler> {
        if seq_len == 0 {
            return Err(Error::Invalid("sequence length must be at least 1".into()));
        }
        if n_tokens < seq_len + 1 {
            return Err(Error::Invalid(format!(
                "corpus of {n_tokens} tokens is too small for windows of {} tokens",
                seq_len + 1
            )));
        }
        let n_starts = n_tokens - seq_len;
        // Golden-ratio fraction of the range, nudged up to the nearest value
        // coprime with n_starts, scatters consecutive windows maximally.
        let mut stride = ((n_starts as f64 * 0.618_033_988_749_894_9) as usize).max(1);
        while gcd(stride, n_starts) != 1 {
            stride += 1;
        }
        let phase = ChaCha8Rng::seed_from_u64(seed).gen_range(0..n_starts);
        Ok(WindowSampler { n_starts, stride, cursor: phase })
    }

    /// Number of distinct window start positions.
    pub fn n_starts(&self) -> usize {
        self.n_starts
    }

    /// Next window start offset.
    pub fn next_start(&mut self) -> usize {
        let s = self.cursor;
        self.cursor = (self.cursor + self.stride) % self.n_starts;
        s
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// One parameter update from accumulated gradients.
///
/// When `adapters_only` is set (the fine-tuning regime), non-adapter tensors
/// are skipped outright: neither the update rule nor any state touches them.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelGrads<T>, adapters_only: bool);
}

/// Collect a gradient tree into per-tensor f64 buffers, in visit order.
fn grad_buffers<T: Scalar>(grads: &ModelGrads<T>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    grads.visit(&mut |_, view| out.push(view.data.iter().map(|x| x.to_f64()).collect()));
    out
}

/// Stochastic gradient descent with optional classical momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Sgd {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive, got {lr}");
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1), got {momentum}");
        Sgd { lr, momentum, velocity: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelGrads<T>, adapters_only: bool) {
        let g = grad_buffers(grads);
        if self.velocity.is_empty() {
            self.velocity = g.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        assert_eq!(self.velocity.len(), g.len(), "optimizer state does not match the model");
        let mut i = 0;
        params.visit_mut(&mut |name, view| {
            if !(adapters_only && !name_is_adapter(name)) {
                let vel = &mut self.velocity[i];
                for (j, x) in view.data.iter_mut().enumerate() {
                    vel[j] = self.momentum * vel[j] + g[i][j];
                    *x = T::from_f64(x.to_f64() - self.lr * vel[j]);
                }
            }
            i += 1;
        });
        assert_eq!(i, g.len(), "parameter and gradient trees have different tensor counts");
    }
}

/// AdamW: Adam moment estimates with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> AdamW {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive, got {lr}");
        assert!((0.0..1.0).contains(&beta1), "beta1 must lie in [0, 1), got {beta1}");
        assert!((0.0..1.0).contains(&beta2), "beta2 must lie in [0, 1), got {beta2}");
        assert!(eps > 0.0, "epsilon must be positive, got {eps}");
        assert!(weight_decay >= 0.0, "weight decay must be non-negative, got {weight_decay}");
        AdamW { lr, beta1, beta2, eps, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for AdamW {
    fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelGrads<T>, adapters_only: bool) {
        let g = grad_buffers(grads);
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), g.len(), "optimizer state does not match the model");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        params.visit_mut(&mut |name, view| {
            if !(adapters_only && !name_is_adapter(name)) {
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                for (j, x) in view.data.iter_mut().enumerate() {
                    let gj = g[i][j];
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    let theta = x.to_f64();
                    *x = T::from_f64(
                        theta - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * theta),
                    );
                }
            }
            i += 1;
        });
        assert_eq!(i, g.len(), "parameter and gradient trees have different tensor counts");
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Loop shape: window sampling, batching, step count, seeding.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Sequences summed into each optimizer step.
    pub batch: usize,
    /// Tokens per sample (the window is one longer for shifted targets).
    pub seq_len: usize,
    pub steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("steps must be at least 1".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Invalid("sequence length must be at least 1".into()));
        }
        if self.seq_len > model.n_context {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds the context window of {}",
                self.seq_len, model.n_context
            )));
        }
        Ok(())
    }
}

/// Train in place over tokenized data; returns the per-step mean loss.
///
/// Each step draws `batch` contiguous windows of `seq_len + 1` tokens (the
/// first `seq_len` are input, shifted by one for targets), sums the batch's
/// gradients, and applies one optimizer step. `on_step` fires after every
/// step with `(step index, mean batch loss)`. A non-finite loss aborts with
/// the offending step and window in the message.
pub fn train_loop<T: Scalar>(
    params: &mut ModelParams<T>,
    config: &ModelConfig,
    tokens: &[usize],
    tc: &TrainConfig,
    opt: &mut dyn Optimizer<T>,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    tc.validate(config)?;
    let mut sampler = WindowSampler::new(tokens.len(), tc.seq_len, tc.seed)?;
    let adapters_only = config.lora.is_some();

    let mut history = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut grads = ModelGrads::zeros_like(params);
        let mut loss_sum = 0.0;
        for _ in 0..tc.batch {
            let start = sampler.next_start();
            let window = &tokens[start..start + tc.seq_len + 1];
            let input = &window[..tc.seq_len];
            let targets: Vec<Option<usize>> = window[1..].iter().map(|&t| Some(t)).collect();

            let trace = model_forward(input, params, config)?;
            let loss = model_loss(&trace, &targets)?.to_f64();
            if !loss.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite loss {loss} at step {step} on the window starting at token {start}; \
                     lower the learning rate or check the data"
                )));
            }
            loss_sum += loss;
            grads.accumulate(&model_backward(&trace, &targets, params, config)?);
        }
        let mean_loss = loss_sum / tc.batch as f64;
        opt.step(params, &grads, adapters_only);
        on_step(step, mean_loss);
        history.push(mean_loss);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Deterministic pseudo-prose generator for tests and desk-scale runs.
///
/// Builds sentences from a small invented lexicon with seeded word choice,
/// so the byte statistics are skewed like real text (letters, spaces,
/// punctuation) and a small model has structure to learn. Output is ASCII,
/// at least `min_len` bytes, identical for identical seeds.
pub fn synthetic_text(seed: u64, min_len: usize) -> String {
    const LEXICON: [&str; 48] = [
        "the", "a", "stone", "river", "mill", "keeper", "lantern", "road", "winter", "summer",
        "wind", "rain", "door", "garden", "letter", "bridge", "tower", "valley", "harbor",
        "market", "old", "young", "quiet", "bright", "heavy", "thin", "grey", "warm", "cold",
        "slow", "walks", "turns", "holds", "carries", "watches", "remembers", "opens", "closes",
        "follows", "crosses", "under", "over", "beside", "through", "toward", "between", "and",
        "then",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_len + 128);
    while out.len() < min_len {
        let n_words = rng.gen_range(4..12);
        for w in 0..n_words {
            let word = LEXICON[rng.gen_range(0..LEXICON.len())];
            if w == 0 {
                let mut chars = word.chars();
                let first = chars.next().unwrap().to_ascii_uppercase();
                out.push(first);
                out.push_str(chars.as_str());
            } else {
                out.push(' ');
                out.push_str(word);
            }
        }
        out.push_str(". ");
    }
    out
}
