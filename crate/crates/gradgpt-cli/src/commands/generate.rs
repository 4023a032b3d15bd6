//! `gradgpt generate`: autoregressive text generation from a checkpoint,
//! optionally with a fine-tuned adapter file layered on top.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use gradgpt_core::model::checkpoint::{fnv1a64, load_adapters_into, load_model, read_adapter_config};
use gradgpt_core::{generate, ModelConfig, SamplerSpec, SamplerStrategy, Scalar};

use crate::opts::{check_vocab_size, standalone_vocab, VocabArg};

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Model checkpoint to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optional adapter checkpoint trained against this base.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    /// Prompt text (must be non-empty and encodable).
    #[arg(long)]
    pub prompt: String,
    /// Number of tokens to generate (0 echoes the prompt).
    #[arg(long, default_value_t = 64)]
    pub n_new: usize,
    /// Sample with this softmax temperature instead of greedy decoding.
    #[arg(long, conflicts_with = "top_k")]
    pub temperature: Option<f64>,
    /// Sample from the k most probable tokens instead of greedy decoding.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Seed for the sampling RNG (ignored by greedy decoding).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Token vocabulary (must match the one used at training time).
    #[arg(long, value_enum, default_value_t = VocabArg::Bytes)]
    pub vocab: VocabArg,
    /// Character-set source for --vocab chars (e.g. the training corpus).
    #[arg(long)]
    pub alphabet_file: Option<PathBuf>,
}

pub fn run<T: Scalar>(args: &GenerateArgs) -> Result<()> {
    let (mut params, mut config) = load_model::<T>(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;

    if let Some(adapter_path) = &args.adapters {
        let (ft_config, _) = read_adapter_config(adapter_path)?;
        let base_part = ModelConfig { lora: None, ..ft_config.clone() };
        if base_part != config {
            bail!(
                "{}: adapter file was written for a different model configuration than {}",
                adapter_path.display(),
                args.checkpoint.display()
            );
        }
        let base_bytes = std::fs::read(&args.checkpoint)?;
        params.attach_adapters(&ft_config, None)?;
        load_adapters_into(adapter_path, &mut params, &ft_config, fnv1a64(&base_bytes))?;
        config = ft_config;
    }

    let vocab = standalone_vocab(args.vocab, args.alphabet_file.as_deref())?;
    check_vocab_size(&vocab, &config)?;

    if args.prompt.is_empty() {
        bail!("--prompt must not be empty");
    }
    let prompt = vocab.encode(&args.prompt)?;

    let strategy = match (args.temperature, args.top_k) {
        (Some(tau), None) => SamplerStrategy::Temperature(tau),
        (None, Some(k)) => SamplerStrategy::TopK(k),
        (None, None) => SamplerStrategy::Greedy,
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let sampler = SamplerSpec { strategy, seed: args.seed };
    sampler.validate(config.n_vocab)?;

    let tokens = generate(&prompt, args.n_new, &sampler, &params, &config)?;
    println!("{}", vocab.decode(&tokens)?);
    Ok(())
}
