//! Exact parameter bookkeeping, computed from the configuration alone with
//! integer arithmetic (no tensors are allocated).

use super::{LoraConfig, ModelConfig};

/// Base-model parameter counts, broken down by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub token_embedding: u64,
    pub position_embedding: u64,
    /// Both layer norms of one block (gains and offsets).
    pub layer_norms_per_block: u64,
    /// All head projections plus the attention output FC of one block.
    pub attention_per_block: u64,
    /// Expanding and contracting FCs of one block.
    pub mlp_per_block: u64,
    /// Sum of the three per-block figures.
    pub per_block: u64,
    /// `per_block × n_blocks`.
    pub blocks_total: u64,
    pub final_norm: u64,
    /// Dense logits head; zero under weight tying (the token table is
    /// reused and the bias is dropped).
    pub logits_head: u64,
    pub total: u64,
}

/// Adapter parameter counts, broken down by attach point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraCounts {
    pub q_per_block: u64,
    pub k_per_block: u64,
    pub v_per_block: u64,
    pub att_proj_per_block: u64,
    pub expand_per_block: u64,
    pub contract_per_block: u64,
    pub per_block: u64,
    pub blocks_total: u64,
    pub logits: u64,
    pub total: u64,
}

/// Count the base model's parameters exactly.
pub fn count_params(config: &ModelConfig) -> ParamCounts {
    let d = config.d as u64;
    let n_h = config.n_h as u64;
    let d_h = config.d_h as u64;
    let d_rho = config.d_rho as u64;
    let n_vocab = config.n_vocab as u64;

    let token_embedding = n_vocab * d;
    let position_embedding = config.n_context as u64 * d;
    let layer_norms_per_block = 4 * d;
    let qk = 2 * n_h * (d * d_rho + d_rho);
    let v = n_h * (d * d_h + d_h);
    let att_proj = d * d + d;
    let attention_per_block = qk + v + att_proj;
    let mlp_per_block = (d * 4 * d + 4 * d) + (4 * d * d + d);
    let per_block = layer_norms_per_block + attention_per_block + mlp_per_block;
    let blocks_total = per_block * config.n_blocks as u64;
    let final_norm = 2 * d;
    let logits_head = if config.weight_tying { 0 } else { d * n_vocab + n_vocab };
    let total =
        token_embedding + position_embedding + blocks_total + final_norm + logits_head;

    ParamCounts {
        token_embedding,
        position_embedding,
        layer_norms_per_block,
        attention_per_block,
        mlp_per_block,
        per_block,
        blocks_total,
        final_norm,
        logits_head,
        total,
    }
}

/// Count the adapter parameters exactly for a given attach pattern. Each
/// adapter holds an `f_in × r` down-projection and an `r × f_out`
/// up-projection, so it contributes `r·(f_in + f_out)`.
pub fn count_lora_params(config: &ModelConfig, lora: &LoraConfig) -> LoraCounts {
    let d = config.d as u64;
    let r = lora.r as u64;
    let fused_rho = (config.n_h * config.d_rho) as u64;
    let fused_v = (config.n_h * config.d_h) as u64;
    let n_vocab = config.n_vocab as u64;
    let a = &lora.attach;
    let on = |flag: bool, n: u64| if flag { n } else { 0 };

    let q_per_block = on(a.q, r * (d + fused_rho));
    let k_per_block = on(a.k, r * (d + fused_rho));
    let v_per_block = on(a.v, r * (d + fused_v));
    let att_proj_per_block = on(a.att_proj, r * (d + d));
    let expand_per_block = on(a.expand, r * (d + 4 * d));
    let contract_per_block = on(a.contract, r * (4 * d + d));
    let per_block = q_per_block
        + k_per_block
        + v_per_block
        + att_proj_per_block
        + expand_per_block
        + contract_per_block;
    let blocks_total = per_block * config.n_blocks as u64;
    let logits = on(a.logits, r * (d + n_vocab));
    let total = blocks_total + logits;

    LoraCounts {
        q_per_block,
        k_per_block,
        v_per_block,
        att_proj_per_block,
        expand_per_block,
        contract_per_block,
        per_block,
        blocks_total,
        logits,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{LoraAttach, LoraConfig, ModelConfig, ModelParams};
    use super::*;
    use crate::layers::Activation;

    fn gpt2(n_blocks: usize, weight_tying: bool) -> ModelConfig {
        ModelConfig { n_blocks, weight_tying, ..ModelConfig::gpt2_small() }
    }

    #[test]
    fn gpt2_small_per_block_breakdown() {
        let c = count_params(&gpt2(12, false));
        assert_eq!(c.token_embedding, 38_597_376);
        assert_eq!(c.position_embedding, 786_432);
        assert_eq!(c.layer_norms_per_block, 3_072);
        assert_eq!(c.attention_per_block, 2_362_368); // 4·(768² + 768)
        assert_eq!(c.mlp_per_block, 4_722_432);
        assert_eq!(c.per_block, 7_087_872);
        assert_eq!(c.final_norm, 1_536);
        assert_eq!(c.logits_head, 38_647_633);
    }

    #[test]
    fn gpt2_small_totals() {
        assert_eq!(count_params(&gpt2(1, false)).total, 85_120_849);
        assert_eq!(count_params(&gpt2(12, false)).total, 163_087_441);
        assert_eq!(count_params(&gpt2(12, true)).total, 124_439_808);
    }

    #[test]
    fn gpt2_small_lora_totals() {
        let config = gpt2(12, false);
        let all16 = LoraConfig { r: 16, alpha: 32.0, attach: LoraAttach::all() };
        let c = count_lora_params(&config, &all16);
        assert_eq!(c.q_per_block, 24_576);
        assert_eq!(c.k_per_block, 24_576);
        assert_eq!(c.v_per_block, 24_576);
        assert_eq!(c.att_proj_per_block, 24_576);
        assert_eq!(c.expand_per_block, 61_440);
        assert_eq!(c.contract_per_block, 61_440);
        assert_eq!(c.per_block, 221_184);
        assert_eq!(c.blocks_total, 2_654_208);
        assert_eq!(c.logits, 816_400);
        assert_eq!(c.total, 3_470_608);

        let logits1 = LoraConfig { r: 1, alpha: 2.0, attach: LoraAttach::logits_only() };
        assert_eq!(count_lora_params(&config, &logits1).total, 51_025);
    }

    /// The symbolic count must equal the number of elements actually stored,
    /// for shapes where every dimension differs (d_ρ ≠ d_h, tied and untied,
    /// with and without adapters).
    #[test]
    fn counts_match_allocated_elements() {
        let base = ModelConfig {
            d: 10,
            n_h: 2,
            d_h: 5,
            d_rho: 3,
            n_blocks: 3,
            n_vocab: 17,
            n_context: 23,
            activation: Activation::Gelu,
            eps: 1e-5,
            weight_tying: false,
            lora: None,
        };
        for weight_tying in [false, true] {
            for lora in [
                None,
                Some(LoraConfig { r: 2, alpha: 4.0, attach: LoraAttach::all() }),
                Some(LoraConfig { r: 1, alpha: 2.0, attach: LoraAttach::logits_only() }),
                Some(LoraConfig {
                    r: 2,
                    alpha: 4.0,
                    attach: LoraAttach::parse("q,v,contract").unwrap(),
                }),
            ] {
                let config = ModelConfig { weight_tying, lora, ..base.clone() };
                let params = ModelParams::<f64>::zeros(&config).unwrap();
                let stored = params.n_elements() as u64;
                let mut expected = count_params(&config).total;
                if let Some(l) = &config.lora {
                    expected += count_lora_params(&config, l).total;
                }
                assert_eq!(stored, expected, "mismatch for tying={weight_tying:?} lora={:?}", config.lora);
            }
        }
    }

    #[test]
    fn tiny_fixture_element_count() {
        let config = ModelConfig::tiny_fixture();
        assert_eq!(count_params(&config).total, 2_003);
        let params = ModelParams::<f64>::zeros(&config).unwrap();
        assert_eq!(params.n_elements(), 2_003);
    }
}
