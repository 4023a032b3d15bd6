//! Shared flag groups and conversions between command-line arguments and
//! core types.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use gradgpt_core::model::counts::count_params;
use gradgpt_core::{
    AdamW, Corpus, LoraAttach, ModelConfig, Optimizer, Scalar, Sgd, Vocab, VocabKind,
};

// ---------------------------------------------------------------------------
// Precision (element width), selected by environment variable
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Read `GRADGPT_PRECISION` (`f32` or `f64`; unset means `f64`).
pub fn precision_from_env() -> Result<Precision> {
    match std::env::var("GRADGPT_PRECISION") {
        Err(std::env::VarError::NotPresent) => Ok(Precision::F64),
        Err(e) => bail!("GRADGPT_PRECISION is not valid unicode: {e}"),
        Ok(v) => match v.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => bail!("GRADGPT_PRECISION must be 'f32' or 'f64', got '{other}'"),
        },
    }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VocabArg {
    /// Byte-level tokens (vocabulary size 256).
    Bytes,
    /// Character set inferred from the corpus (or an alphabet file).
    Chars,
}

impl VocabArg {
    pub fn kind(self) -> VocabKind {
        match self {
            VocabArg::Bytes => VocabKind::Bytes,
            VocabArg::Chars => VocabKind::Chars,
        }
    }
}

/// Build a vocabulary without a training corpus (for `generate`): byte-level
/// directly, or a character set read from `alphabet_file`.
pub fn standalone_vocab(vocab: VocabArg, alphabet_file: Option<&Path>) -> Result<Vocab> {
    match vocab {
        VocabArg::Bytes => Ok(Vocab::Bytes),
        VocabArg::Chars => {
            let path = alphabet_file.context(
                "--vocab chars needs --alphabet-file <path> (a text file containing every \
                 character of the training vocabulary, e.g. the training corpus itself)",
            )?;
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading alphabet file {}", path.display()))?;
            Ok(Corpus::from_text(&text, VocabKind::Chars).vocab)
        }
    }
}

/// Load a corpus file under the selected vocabulary.
pub fn load_corpus(path: &Path, vocab: VocabArg) -> Result<Corpus> {
    let raw = std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(Corpus::from_bytes(&raw, vocab.kind())?)
}

/// The model's vocabulary size and the tokenizer's must agree exactly.
pub fn check_vocab_size(vocab: &Vocab, config: &ModelConfig) -> Result<()> {
    if vocab.n_vocab() != config.n_vocab {
        bail!(
            "vocabulary size mismatch: the tokenizer has {} tokens but the model was built \
             for {} (use the same --vocab settings as at training time)",
            vocab.n_vocab(),
            config.n_vocab
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model dimensions
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ModelOpts {
    /// Model width (residual stream features).
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Attention heads per block.
    #[arg(long, default_value_t = 4)]
    pub n_h: usize,
    /// Value width per head (n-h × d-h must equal d).
    #[arg(long, default_value_t = 16)]
    pub d_h: usize,
    /// Query/key width per head.
    #[arg(long, default_value_t = 16)]
    pub d_rho: usize,
    /// Transformer blocks.
    #[arg(long, default_value_t = 2)]
    pub n_blocks: usize,
    /// Maximum sequence length (position table size).
    #[arg(long, default_value_t = 64)]
    pub n_context: usize,
    /// Nonlinearity between the two MLP layers: relu or gelu.
    #[arg(long, default_value = "gelu")]
    pub activation: String,
    /// Layer-norm variance cushion.
    #[arg(long, default_value_t = 1e-5)]
    pub ln_eps: f64,
    /// Reuse the token table as the logits projection (drops the logits bias).
    #[arg(long)]
    pub weight_tying: bool,
}

impl ModelOpts {
    pub fn to_config(&self, n_vocab: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            d: self.d,
            n_h: self.n_h,
            d_h: self.d_h,
            d_rho: self.d_rho,
            n_blocks: self.n_blocks,
            n_vocab,
            n_context: self.n_context,
            activation: gradgpt_core::layers::activation::Activation::parse(&self.activation)?,
            eps: self.ln_eps,
            weight_tying: self.weight_tying,
            lora: None,
        };
        config.validate()?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    /// Stochastic gradient descent (optionally with momentum).
    Sgd,
    /// Adam with decoupled weight decay.
    #[value(name = "adamw")]
    AdamW,
}

#[derive(Args, Debug)]
pub struct OptimizerOpts {
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    /// Learning rate.
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// SGD momentum coefficient (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// AdamW first-moment decay.
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    /// AdamW second-moment decay.
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    /// AdamW denominator cushion.
    #[arg(long, default_value_t = 1e-8)]
    pub opt_eps: f64,
    /// AdamW decoupled weight decay.
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
}

impl OptimizerOpts {
    pub fn build<T: Scalar>(&self) -> Result<Box<dyn Optimizer<T>>> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!("--lr must be positive and finite, got {}", self.lr);
        }
        match self.optimizer {
            OptimizerArg::Sgd => {
                if !(0.0..1.0).contains(&self.momentum) {
                    bail!("--momentum must lie in [0, 1), got {}", self.momentum);
                }
                Ok(Box::new(Sgd::new(self.lr, self.momentum)))
            }
            OptimizerArg::AdamW => {
                for (name, value) in [("--beta1", self.beta1), ("--beta2", self.beta2)] {
                    if !(0.0..1.0).contains(&value) {
                        bail!("{name} must lie in [0, 1), got {value}");
                    }
                }
                if !(self.opt_eps.is_finite() && self.opt_eps > 0.0) {
                    bail!("--opt-eps must be positive and finite, got {}", self.opt_eps);
                }
                if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
                    bail!("--weight-decay must be non-negative, got {}", self.weight_decay);
                }
                Ok(Box::new(AdamW::new(self.lr, self.beta1, self.beta2, self.opt_eps, self.weight_decay)))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training-loop shape
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct FlowOpts {
    /// Sequences per optimizer step (gradients are summed over the batch).
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Tokens per training sequence (must not exceed n-context).
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    /// Optimizer steps.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Seed for initialization and window sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print a loss line every this many steps.
    #[arg(long, default_value_t = 10)]
    pub log_interval: usize,
}

// ---------------------------------------------------------------------------
// LoRA attach-point parsing
// ---------------------------------------------------------------------------

/// Parse `--lora-attach`: `all` or a comma list of
/// q, k, v, att-proj, expand, contract, logits.
pub fn parse_attach(spec: &str) -> Result<LoraAttach> {
    if spec.trim() == "all" {
        return Ok(LoraAttach::all());
    }
    let mut attach = LoraAttach {
        q: false,
        k: false,
        v: false,
        att_proj: false,
        expand: false,
        contract: false,
        logits: false,
    };
    for part in spec.split(',') {
        match part.trim() {
            "q" => attach.q = true,
            "k" => attach.k = true,
            "v" => attach.v = true,
            "att-proj" => attach.att_proj = true,
            "expand" => attach.expand = true,
            "contract" => attach.contract = true,
            "logits" => attach.logits = true,
            other => bail!(
                "unknown adapter attach point '{other}' (expected 'all' or a comma list of \
                 q, k, v, att-proj, expand, contract, logits)"
            ),
        }
    }
    if !attach.any() {
        bail!("--lora-attach selected no attach points");
    }
    Ok(attach)
}

// ---------------------------------------------------------------------------
// Formatting helpers
// ---------------------------------------------------------------------------

/// Thousands separators: 163087441 → "163,087,441".
pub fn commas(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// One-line key=value training summary (machine-readable).
pub fn print_train_summary(history: &[f64], extra: &[(&str, String)]) {
    let initial = history.first().copied().unwrap_or(f64::NAN);
    let final_loss = history.last().copied().unwrap_or(f64::NAN);
    let mut line = format!(
        "summary steps={} initial-loss={initial:.6} final-loss={final_loss:.6}",
        history.len()
    );
    for (key, value) in extra {
        line.push_str(&format!(" {key}={value}"));
    }
    println!("{line}");
}

/// Total base-parameter count for a configuration (for summaries).
pub fn total_params(config: &ModelConfig) -> u64 {
    count_params(config).total
}
