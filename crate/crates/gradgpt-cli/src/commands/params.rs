//! `gradgpt params`: exact parameter accounting for a configuration,
//! including weight-tying savings and adapter (LoRA) trainable counts.

use anyhow::Result;
use clap::{Args, ValueEnum};
use gradgpt_core::model::counts::{count_lora_params, count_params};
use gradgpt_core::{LoraConfig, ModelConfig};

use crate::opts::{commas, parse_attach};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// d=768, 12 heads of width 64, 12 blocks, 50257 tokens, 1024 context.
    Gpt2Small,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Start from a named configuration; explicit flags override its fields.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n_h: Option<usize>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub d_rho: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub n_vocab: Option<usize>,
    #[arg(long)]
    pub n_context: Option<usize>,
    /// Count with the token table reused as the logits projection.
    #[arg(long)]
    pub weight_tying: bool,
    /// Also report low-rank adapter counts at this rank.
    #[arg(long)]
    pub lora_r: Option<usize>,
    /// Adapter attach points for --lora-r (default: every projection).
    #[arg(long, default_value = "all")]
    pub lora_attach: String,
}

impl ParamsArgs {
    fn config(&self) -> Result<ModelConfig> {
        let base = match self.preset {
            Some(Preset::Gpt2Small) => ModelConfig::gpt2_small(),
            None => ModelConfig {
                d: 64,
                n_h: 4,
                d_h: 16,
                d_rho: 16,
                n_blocks: 2,
                n_vocab: 256,
                n_context: 64,
                ..ModelConfig::gpt2_small()
            },
        };
        let config = ModelConfig {
            d: self.d.unwrap_or(base.d),
            n_h: self.n_h.unwrap_or(base.n_h),
            d_h: self.d_h.unwrap_or(base.d_h),
            d_rho: self.d_rho.unwrap_or(base.d_rho),
            n_blocks: self.n_blocks.unwrap_or(base.n_blocks),
            n_vocab: self.n_vocab.unwrap_or(base.n_vocab),
            n_context: self.n_context.unwrap_or(base.n_context),
            weight_tying: self.weight_tying,
            ..base
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn run(args: &ParamsArgs) -> Result<()> {
    let config = args.config()?;
    let counts = count_params(&config);
    let (d, n_h, d_h, d_rho) = (config.d, config.n_h, config.d_h, config.d_rho);

    println!(
        "configuration: d={d} n-h={n_h} d-h={d_h} d-rho={d_rho} n-blocks={} n-vocab={} \
         n-context={} weight-tying={}",
        config.n_blocks, config.n_vocab, config.n_context, config.weight_tying
    );
    println!();

    let row = |name: &str, dims: &str, value: u64| {
        println!("{name:<22} {dims:<46} {:>15}", commas(value));
    };
    println!("{:<22} {:<46} {:>15}", "component", "dimensionality (incl. bias row)", "parameters");
    row("token embedding", &format!("{} x {d}", config.n_vocab), counts.token_embedding);
    row("position embedding", &format!("{} x {d}", config.n_context), counts.position_embedding);
    row("layer norms / block", &format!("2 x ({d} + {d})"), counts.layer_norms_per_block);
    row(
        "attention / block",
        &format!("{n_h} x {} x ({d_rho} + {d_rho} + {d_h}) + {} x {d}", d + 1, n_h * d_h + 1),
        counts.attention_per_block,
    );
    row(
        "mlp / block",
        &format!("{} x {} + {} x {d}", d + 1, 4 * d, 4 * d + 1),
        counts.mlp_per_block,
    );
    row("block total", "", counts.per_block);
    row("all blocks", &format!("{} x {}", config.n_blocks, commas(counts.per_block)), counts.blocks_total);
    row("final layer norm", &format!("{d} + {d}"), counts.final_norm);
    if config.weight_tying {
        row("logits head", "tied to the token embedding (no bias)", counts.logits_head);
    } else {
        row("logits head", &format!("{} x {}", d + 1, config.n_vocab), counts.logits_head);
    }
    row("grand total", "", counts.total);

    // Weight-tying savings, from the counterfactual configuration.
    let flipped = ModelConfig { weight_tying: !config.weight_tying, ..config.clone() };
    let flipped_total = count_params(&flipped).total;
    println!();
    if config.weight_tying {
        println!(
            "weight tying saves {} parameters (untied total would be {})",
            commas(flipped_total - counts.total),
            commas(flipped_total)
        );
    } else {
        println!(
            "weight tying would save {} parameters ({} -> {})",
            commas(counts.total - flipped_total),
            commas(counts.total),
            commas(flipped_total)
        );
    }

    if let Some(r) = args.lora_r {
        let lora = LoraConfig { r, alpha: 2.0, attach: parse_attach(&args.lora_attach)? };
        let adapters = count_lora_params(&config, &lora);
        println!();
        println!("low-rank adapters at rank {r} ({}):", args.lora_attach);
        let arow = |name: &str, value: u64| println!("  {name:<20} {:>15}", commas(value));
        arow("q / block", adapters.q_per_block);
        arow("k / block", adapters.k_per_block);
        arow("v / block", adapters.v_per_block);
        arow("att-proj / block", adapters.att_proj_per_block);
        arow("expand / block", adapters.expand_per_block);
        arow("contract / block", adapters.contract_per_block);
        arow("per block", adapters.per_block);
        arow("all blocks", adapters.blocks_total);
        arow("logits", adapters.logits);
        arow("trainable total", adapters.total);
        let pct = 100.0 * adapters.total as f64 / counts.total as f64;
        println!(
            "trainable fraction: {} of {} ({pct:.2}% of the model, {:.2}% reduction)",
            commas(adapters.total),
            commas(counts.total),
            100.0 - pct
        );
    }
    Ok(())
}
