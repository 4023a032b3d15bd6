//! gradgpt: a from-scratch next-token-prediction transformer engine with
//! hand-derived gradients, driven from the command line.
//!
//! Element precision is selected by the environment variable
//! `GRADGPT_PRECISION` (`f32` or `f64`, default `f64`); `gradcheck` always
//! runs at 64-bit because the finite-difference oracle needs it.

mod commands;
mod opts;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{finetune, generate, gradcheck, params, train};
use opts::{precision_from_env, Precision};

#[derive(Parser, Debug)]
#[command(
    name = "gradgpt",
    version,
    about = "Train, inspect, and sample a small transformer language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a text corpus and write a checkpoint.
    Train(train::TrainArgs),
    /// Generate text from a checkpoint.
    Generate(generate::GenerateArgs),
    /// Verify analytical gradients against finite differences (64-bit).
    Gradcheck(gradcheck::GradcheckArgs),
    /// Print exact parameter counts for a configuration.
    Params(params::ParamsArgs),
    /// Train low-rank adapters on a frozen base checkpoint.
    FinetuneLora(finetune::FinetuneArgs),
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(args) => match precision_from_env()? {
            Precision::F64 => train::run::<f64>(args),
            Precision::F32 => train::run::<f32>(args),
        },
        Command::Generate(args) => match precision_from_env()? {
            Precision::F64 => generate::run::<f64>(args),
            Precision::F32 => generate::run::<f32>(args),
        },
        Command::FinetuneLora(args) => match precision_from_env()? {
            Precision::F64 => finetune::run::<f64>(args),
            Precision::F32 => finetune::run::<f32>(args),
        },
        // These two never compute in the selected width (gradcheck is pinned
        // to 64-bit, params is integer arithmetic), but a malformed
        // GRADGPT_PRECISION should be diagnosed no matter which command
        // happens to run first.
        Command::Gradcheck(args) => {
            precision_from_env()?;
            gradcheck::run(args)
        }
        Command::Params(args) => {
            precision_from_env()?;
            params::run(args)
        }
    }
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (e.g. `gradgpt gradcheck |
    // head`), like other line-oriented tools, instead of panicking.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
