//! `gradgpt finetune-lora`: train low-rank adapters on top of a frozen base
//! checkpoint and save them as a separate adapter file that references the
//! base by content fingerprint.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use gradgpt_core::model::checkpoint::{fnv1a64, load_model, save_adapters};
use gradgpt_core::model::counts::{count_lora_params, count_params};
use gradgpt_core::{train_loop, LoraConfig, ModelConfig, Scalar, TrainConfig};

use crate::opts::{
    check_vocab_size, load_corpus, parse_attach, print_train_summary, FlowOpts, OptimizerOpts,
    VocabArg,
};

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Base checkpoint to adapt (never modified).
    #[arg(long)]
    pub base: PathBuf,
    /// Path to the fine-tuning text.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the adapter checkpoint.
    #[arg(long)]
    pub adapters_out: PathBuf,
    /// Adapter rank.
    #[arg(long, default_value_t = 4)]
    pub lora_r: usize,
    /// Adapter scaling factor.
    #[arg(long, default_value_t = 2.0)]
    pub lora_alpha: f64,
    /// Attach points: 'all' or a comma list of q, k, v, att-proj, expand,
    /// contract, logits.
    #[arg(long, default_value = "all")]
    pub lora_attach: String,
    /// Token vocabulary (must match the base model's).
    #[arg(long, value_enum, default_value_t = VocabArg::Bytes)]
    pub vocab: VocabArg,
    #[command(flatten)]
    pub optimizer: OptimizerOpts,
    #[command(flatten)]
    pub flow: FlowOpts,
}

pub fn run<T: Scalar>(args: &FinetuneArgs) -> Result<()> {
    let base_bytes =
        std::fs::read(&args.base).with_context(|| format!("reading {}", args.base.display()))?;
    let base_hash = fnv1a64(&base_bytes);
    let (mut params, base_config) = load_model::<T>(&args.base)
        .with_context(|| format!("loading base checkpoint {}", args.base.display()))?;

    let lora =
        LoraConfig { r: args.lora_r, alpha: args.lora_alpha, attach: parse_attach(&args.lora_attach)? };
    let ft_config = ModelConfig { lora: Some(lora), ..base_config.clone() };
    ft_config.validate()?;

    let corpus = load_corpus(&args.corpus, args.vocab)?;
    check_vocab_size(&corpus.vocab, &ft_config)?;

    params.attach_adapters(&ft_config, Some(args.flow.seed))?;
    let mut opt = args.optimizer.build::<T>()?;
    let tc = TrainConfig {
        batch: args.flow.batch,
        seq_len: args.flow.seq_len,
        steps: args.flow.steps,
        seed: args.flow.seed,
    };

    let interval = args.flow.log_interval.max(1);
    let steps = tc.steps;
    let history = train_loop(
        &mut params,
        &ft_config,
        &corpus.tokens,
        &tc,
        opt.as_mut(),
        &mut |step, loss| {
            let n = step + 1;
            if n == 1 || n == steps || n % interval == 0 {
                println!("step {n} loss {loss:.6}");
            }
        },
    )?;

    save_adapters(&args.adapters_out, &params, &ft_config, base_hash)
        .with_context(|| format!("writing adapters {}", args.adapters_out.display()))?;

    let trainable = count_lora_params(&base_config, &lora).total;
    let full = count_params(&base_config).total;
    print_train_summary(
        &history,
        &[
            ("trainable", trainable.to_string()),
            ("base-params", full.to_string()),
            ("trainable-pct", format!("{:.2}", 100.0 * trainable as f64 / full as f64)),
            ("base-hash", format!("{base_hash:016x}")),
            ("adapters", args.adapters_out.display().to_string()),
        ],
    );
    Ok(())
}
