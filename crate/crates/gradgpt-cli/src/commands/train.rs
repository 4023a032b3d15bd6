//! `gradgpt train`: fit a model on a text corpus and write a checkpoint.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use gradgpt_core::model::checkpoint::save_model;
use gradgpt_core::{train_loop, ModelParams, Scalar, TrainConfig};

use crate::opts::{
    check_vocab_size, load_corpus, print_train_summary, total_params, FlowOpts, ModelOpts,
    OptimizerOpts, VocabArg,
};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Path to the training text.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    /// Token vocabulary.
    #[arg(long, value_enum, default_value_t = VocabArg::Bytes)]
    pub vocab: VocabArg,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub optimizer: OptimizerOpts,
    #[command(flatten)]
    pub flow: FlowOpts,
}

pub fn run<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, args.vocab)?;
    let config = args.model.to_config(corpus.vocab.n_vocab())?;
    check_vocab_size(&corpus.vocab, &config)?;

    let mut params = ModelParams::<T>::init(&config, args.flow.seed)?;
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
        &config,
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

    save_model(&args.checkpoint_out, &params, &config)
        .with_context(|| format!("writing checkpoint {}", args.checkpoint_out.display()))?;

    print_train_summary(
        &history,
        &[
            ("n-params", total_params(&config).to_string()),
            ("n-tokens", corpus.n_tokens().to_string()),
            ("n-vocab", config.n_vocab.to_string()),
            ("checkpoint", args.checkpoint_out.display().to_string()),
        ],
    );
    Ok(())
}
