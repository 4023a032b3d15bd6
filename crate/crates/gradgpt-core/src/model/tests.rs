//! Whole-model verification: forward wiring against a hand-composed chain,
//! every gradient against central differences (untied, tied, and
//! adapter-frozen), tying/merging algebra, and the traversal contract.

use super::*;
use crate::layers::{mha_forward, Activation};

fn micro_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        n_h: 2,
        d_h: 2,
        d_rho: 2,
        n_blocks: 2,
        n_vocab: 5,
        n_context: 8,
        activation: Activation::Gelu,
        eps: 1e-5,
        weight_tying: false,
        lora: None,
    }
}

const TOKENS: [usize; 3] = [0, 3, 1];
const TARGETS: [Option<usize>; 3] = [Some(2), None, Some(4)];

/// Loss as a function of a single flattened parameter entry.
fn probe(
    params: &ModelParams<f64>,
    config: &ModelConfig,
    name: &str,
    flat: usize,
    value: f64,
) -> f64 {
    let mut p = params.clone();
    p.visit_mut(&mut |n, view| {
        if n == name {
            view.data[flat] = value;
        }
    });
    let trace = model_forward(&TOKENS, &p, config).unwrap();
    model_loss(&trace, &TARGETS).unwrap()
}

/// Sweep every parameter entry with central differences. When
/// `adapters_only` is set (the frozen fine-tuning regime), base tensors are
/// instead asserted to carry exact-zero gradients.
fn fd_sweep(config: &ModelConfig, seed: u64, adapters_only: bool, expect_checked: usize) {
    let params = ModelParams::<f64>::init_verification(config, seed).unwrap();
    let trace = model_forward(&TOKENS, &params, config).unwrap();
    let grads = model_backward(&trace, &TARGETS, &params, config).unwrap();

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.visit(&mut |name, view| analytic.push((name.to_string(), view.data.to_vec())));
    let mut values: Vec<Vec<f64>> = Vec::new();
    params.visit(&mut |_, view| values.push(view.data.to_vec()));
    assert_eq!(analytic.len(), values.len());

    let mut checked = 0usize;
    for ((name, grad), theta) in analytic.iter().zip(&values) {
        if adapters_only && !name_is_adapter(name) {
            for (i, g) in grad.iter().enumerate() {
                assert_eq!(*g, 0.0, "frozen base gradient {name}[{i}] must be exactly zero");
            }
            continue;
        }
        for (flat, (&g, &th)) in grad.iter().zip(theta).enumerate() {
            let h = 1e-5 * th.abs().max(1.0);
            let lp = probe(&params, config, name, flat, th + h);
            let lm = probe(&params, config, name, flat, th - h);
            let numeric = (lp - lm) / (2.0 * h);
            if g == 0.0 {
                assert!(
                    numeric.abs() < 1e-9,
                    "{name}[{flat}]: analytic is exactly zero but numeric is {numeric:e}"
                );
            } else {
                // The difference quotient carries ~1e-11 of truncation and
                // rounding noise, so gradients within a few decades of that
                // floor are held to absolute (not relative) agreement.
                let abs = (g - numeric).abs();
                let rel = abs / g.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel < 1e-6 || abs < 1e-9,
                    "{name}[{flat}]: analytic {g:e} vs numeric {numeric:e} (relative {rel:e})"
                );
            }
            checked += 1;
        }
    }
    assert_eq!(checked, expect_checked, "sweep covered an unexpected number of entries");
}

#[test]
fn backward_matches_central_differences_untied() {
    fd_sweep(&micro_config(), 1001, false, 573);
}

#[test]
fn backward_matches_central_differences_tied() {
    let config = ModelConfig { weight_tying: true, ..micro_config() };
    fd_sweep(&config, 1002, false, 548);
}

#[test]
fn adapter_gradients_match_central_differences_and_base_is_frozen() {
    let config = ModelConfig {
        lora: Some(LoraConfig { r: 2, alpha: 3.5, attach: LoraAttach::all() }),
        ..micro_config()
    };
    fd_sweep(&config, 1003, true, 306);
}

#[test]
fn adapter_gradients_with_tying_and_logits_adapter() {
    let config = ModelConfig {
        weight_tying: true,
        lora: Some(LoraConfig { r: 2, alpha: 2.0, attach: LoraAttach::logits_only() }),
        ..micro_config()
    };
    fd_sweep(&config, 1004, true, 18);
}

/// The forward pass must equal the documented chain composed by hand from
/// the layer primitives — operation for operation, so exactly.
#[test]
fn forward_matches_layer_composition() {
    let config = ModelConfig::tiny_fixture();
    let params = ModelParams::<f64>::init_verification(&config, 42).unwrap();
    let tokens = [3, 1, 4, 1, 5];
    let trace = model_forward(&tokens, &params, &config).unwrap();

    let tok = crate::layers::embedding_forward(&tokens, &params.w_tok).unwrap();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = crate::layers::embedding_forward(&positions, &params.w_pos).unwrap();
    let mut x = tok.add(&pos);
    for b in &params.blocks {
        let (z1, _) = crate::layers::layernorm_forward(&x, &b.ln1);
        let (mha, _) = mha_forward(&z1, &b.heads);
        let a4 = crate::layers::linear_forward(&mha, &b.att_proj);
        let r1 = x.add(&a4);
        let (z2, _) = crate::layers::layernorm_forward(&r1, &b.ln2);
        let e = crate::layers::linear_forward(&z2, &b.fc_expand);
        let (g, _) = crate::layers::activation_forward(&e, config.activation);
        let c = crate::layers::linear_forward(&g, &b.fc_contract);
        x = r1.add(&c);
    }
    let (zf, _) = crate::layers::layernorm_forward(&x, &params.ln_final);
    let logits = crate::layers::linear_forward(&zf, params.fc_logits.as_ref().unwrap());

    assert_eq!(trace.logits.max_abs_diff(&logits), 0.0, "wiring diverges from the documented chain");
    let y = softmax_rows(&logits, None);
    assert_eq!(trace.y_pred.max_abs_diff(&y), 0.0);
}

#[test]
fn zero_weights_predict_uniformly() {
    let config = ModelConfig::tiny_fixture();
    let params = ModelParams::<f64>::zeros(&config).unwrap();
    let tokens = [0, 1, 2];
    let trace = model_forward(&tokens, &params, &config).unwrap();
    let uniform = 1.0 / config.n_vocab as f64;
    for t in 0..tokens.len() {
        for j in 0..config.n_vocab {
            assert!((trace.y_pred[(t, j)] - uniform).abs() < 1e-15);
        }
    }
    let targets = [Some(1), Some(2), Some(3)];
    let loss = model_loss(&trace, &targets).unwrap();
    assert!((loss - (config.n_vocab as f64).ln()).abs() < 1e-12);
}

/// Setting the untied head to the transposed token table makes the two
/// parameterizations compute the same function, and the tied gradient must
/// equal the sum of the two untied gradients (table + transposed head).
#[test]
fn tied_gradient_is_sum_of_untied_parts()
{
    let untied_config = ModelConfig::tiny_fixture();
    let mut params = ModelParams::<f64>::init_verification(&untied_config, 77).unwrap();
    {
        let fc = params.fc_logits.as_mut().unwrap();
        fc.w = params.w_tok.w_emb.transpose();
        for b in &mut fc.b {
            *b = 0.0;
        }
    }
    let tied_config = ModelConfig { weight_tying: true, ..untied_config.clone() };
    let mut tied_params = params.clone();
    tied_params.fc_logits = None;

    let tokens = [9, 2, 7, 2];
    let targets = [Some(1), Some(10), None, Some(4)];
    let trace_u = model_forward(&tokens, &params, &untied_config).unwrap();
    let trace_t = model_forward(&tokens, &tied_params, &tied_config).unwrap();
    assert_eq!(trace_u.logits.max_abs_diff(&trace_t.logits), 0.0, "the two heads must agree exactly");

    let gu = model_backward(&trace_u, &targets, &params, &untied_config).unwrap();
    let gt = model_backward(&trace_t, &targets, &tied_params, &tied_config).unwrap();
    let expected = gu.w_tok.add(&gu.fc_logits.as_ref().unwrap().w.transpose());
    assert!(
        gt.w_tok.max_abs_diff(&expected) < 1e-12,
        "tied gradient should be the sum of the untied table and head gradients"
    );
}

#[test]
fn keys_bias_gradients_are_exactly_zero() {
    let config = ModelConfig::tiny_fixture();
    let params = ModelParams::<f64>::init_verification(&config, 5).unwrap();
    let trace = model_forward(&[1, 2, 3, 4], &params, &config).unwrap();
    let grads =
        model_backward(&trace, &[Some(2), Some(3), Some(4), Some(5)], &params, &config).unwrap();
    let mut seen = 0;
    grads.visit(&mut |name, view| {
        if name.ends_with(".k.b") {
            seen += 1;
            for &x in view.data {
                assert_eq!(x, 0.0, "{name} must be exactly zero");
            }
        }
    });
    assert_eq!(seen, config.n_blocks * config.n_h);
}

#[test]
fn merged_adapters_compute_the_same_function() {
    let config = ModelConfig {
        lora: Some(LoraConfig { r: 2, alpha: 3.0, attach: LoraAttach::all() }),
        ..ModelConfig::tiny_fixture()
    };
    let params = ModelParams::<f64>::init_verification(&config, 31).unwrap();
    let tokens = [5, 0, 9, 3, 3, 8];
    let two_path = model_forward(&tokens, &params, &config).unwrap();

    let (merged, merged_config) = merge_lora(&params, &config);
    assert!(merged_config.lora.is_none());
    assert!(merged.lora_logits.is_none());
    assert!(merged.blocks.iter().all(|b| b.adapters.is_none()));
    let one_path = model_forward(&tokens, &merged, &merged_config).unwrap();
    let diff = two_path.logits.max_abs_diff(&one_path.logits);
    assert!(diff <= 1e-12, "merged logits diverge by {diff:e}");
}

#[test]
fn merging_a_tied_logits_adapter_unties_the_head() {
    let config = ModelConfig {
        weight_tying: true,
        lora: Some(LoraConfig { r: 2, alpha: 2.0, attach: LoraAttach::all() }),
        ..ModelConfig::tiny_fixture()
    };
    let params = ModelParams::<f64>::init_verification(&config, 32).unwrap();
    let tokens = [1, 2, 3];
    let two_path = model_forward(&tokens, &params, &config).unwrap();

    let (merged, merged_config) = merge_lora(&params, &config);
    assert!(!merged_config.weight_tying, "merged model must untie to keep embeddings intact");
    assert!(merged.fc_logits.is_some());
    let one_path = model_forward(&tokens, &merged, &merged_config).unwrap();
    let diff = two_path.logits.max_abs_diff(&one_path.logits);
    assert!(diff <= 1e-12, "merged logits diverge by {diff:e}");
}

#[test]
fn fresh_adapters_leave_the_function_unchanged() {
    let base_config = ModelConfig::tiny_fixture();
    let mut params = ModelParams::<f64>::init(&base_config, 4).unwrap();
    let tokens = [1, 2, 3, 4, 5, 6];
    let before = model_forward(&tokens, &params, &base_config).unwrap();

    let config = ModelConfig {
        lora: Some(LoraConfig { r: 2, alpha: 8.0, attach: LoraAttach::all() }),
        ..base_config
    };
    params.attach_adapters(&config, Some(99)).unwrap();
    let after = model_forward(&tokens, &params, &config).unwrap();
    assert_eq!(before.logits.max_abs_diff(&after.logits), 0.0, "zero up-projections must be inert");

    // A second attach is refused, as is attaching without a config.
    assert!(params.attach_adapters(&config, None).is_err());
    let mut plain = ModelParams::<f64>::zeros(&base_config).unwrap();
    assert!(plain.attach_adapters(&base_config, None).is_err());
}

#[test]
fn traversal_streams_are_parallel_and_deterministic() {
    for config in [
        ModelConfig::tiny_fixture(),
        ModelConfig { weight_tying: true, ..ModelConfig::tiny_fixture() },
        ModelConfig {
            lora: Some(LoraConfig { r: 1, alpha: 1.0, attach: LoraAttach::all() }),
            ..ModelConfig::tiny_fixture()
        },
    ] {
        let mut params = ModelParams::<f64>::zeros(&config).unwrap();
        let grads = ModelGrads::zeros_like(&params);
        fn params_stream(p: &ModelParams<f64>) -> Vec<(String, usize, usize)> {
            let mut v = Vec::new();
            p.visit(&mut |n, view| v.push((n.to_string(), view.rows, view.cols)));
            v
        }
        let p1 = params_stream(&params);
        let p2 = params_stream(&params);
        let mut g1: Vec<(String, usize, usize)> = Vec::new();
        grads.visit(&mut |n, view| g1.push((n.to_string(), view.rows, view.cols)));
        assert_eq!(p1, p2, "traversal must be deterministic");
        assert_eq!(p1, g1, "parameter and gradient traversals must align");

        let mut p3: Vec<(String, usize, usize)> = Vec::new();
        params.visit_mut(&mut |n, view| p3.push((n.to_string(), view.rows, view.cols)));
        assert_eq!(p1, p3, "visit and visit_mut must agree");

        if config.weight_tying {
            assert!(!p1.iter().any(|(n, _, _)| n.starts_with("fc_logits")));
        } else {
            assert!(p1.iter().any(|(n, _, _)| n == "fc_logits.w"));
        }
    }
}

#[test]
fn model_loss_agrees_with_the_loss_layer() {
    let config = ModelConfig::tiny_fixture();
    let params = ModelParams::<f64>::init_verification(&config, 13).unwrap();
    let tokens = [4, 7, 1, 0];
    let targets = [Some(7), Some(1), None, Some(9)];
    let trace = model_forward(&tokens, &params, &config).unwrap();
    let (loss, y_pred) = crate::layers::loss_forward(&trace.logits, &targets).unwrap();
    assert_eq!(trace.y_pred.max_abs_diff(&y_pred), 0.0);
    let mine = model_loss(&trace, &targets).unwrap();
    assert!((mine - loss).abs() < 1e-14, "{mine} vs {loss}");
}

#[test]
fn forward_rejects_bad_inputs() {
    let config = ModelConfig::tiny_fixture();
    let params = ModelParams::<f64>::zeros(&config).unwrap();
    assert!(model_forward(&[], &params, &config).is_err());
    let too_long: Vec<usize> = vec![0; config.n_context + 1];
    let err = model_forward(&too_long, &params, &config).unwrap_err();
    assert!(err.to_string().contains("context"), "unexpected error: {err}");
    assert!(model_forward(&[0, config.n_vocab], &params, &config).is_err());
}

#[test]
fn config_validation_catches_inconsistencies() {
    let good = ModelConfig::tiny_fixture();
    assert!(good.validate().is_ok());
    assert!(ModelConfig { d_h: 3, ..good.clone() }.validate().is_err());
    assert!(ModelConfig { n_blocks: 0, ..good.clone() }.validate().is_err());
    assert!(ModelConfig { n_vocab: 1, ..good.clone() }.validate().is_err());
    assert!(ModelConfig { eps: -1e-9, ..good.clone() }.validate().is_err());
    let bad_rank = ModelConfig {
        lora: Some(LoraConfig { r: 7, alpha: 1.0, attach: LoraAttach::all() }),
        ..good.clone()
    };
    assert!(bad_rank.validate().is_err(), "rank 7 exceeds the fused q/k width of 6");
    assert!(ModelConfig::gpt2_small().validate().is_ok());
}

#[test]
fn attach_list_round_trips() {
    for list in ["q,k,v,att_proj,expand,contract,logits", "q", "logits", "v,expand"] {
        let parsed = LoraAttach::parse(list).unwrap();
        assert_eq!(parsed.to_list(), list);
    }
    assert_eq!(LoraAttach::parse("all").unwrap(), LoraAttach::all());
    assert!(LoraAttach::parse("").is_err());
    assert!(LoraAttach::parse("qq").is_err());
}

#[test]
fn gradient_accumulation_adds_elementwise() {
    let config = micro_config();
    let params = ModelParams::<f64>::init_verification(&config, 8).unwrap();
    let t1 = model_forward(&[0, 1, 2], &params, &config).unwrap();
    let t2 = model_forward(&[4, 4, 1], &params, &config).unwrap();
    let g1 = model_backward(&t1, &[Some(1), Some(2), Some(3)], &params, &config).unwrap();
    let g2 = model_backward(&t2, &[Some(0), None, Some(2)], &params, &config).unwrap();

    let mut acc = ModelGrads::zeros_like(&params);
    acc.accumulate(&g1);
    acc.accumulate(&g2);

    let mut flat_acc: Vec<f64> = Vec::new();
    acc.visit(&mut |_, v| flat_acc.extend_from_slice(v.data));
    let mut flat_sum: Vec<f64> = Vec::new();
    let mut flat2: Vec<f64> = Vec::new();
    g1.visit(&mut |_, v| flat_sum.extend_from_slice(v.data));
    g2.visit(&mut |_, v| flat2.extend_from_slice(v.data));
    for ((a, s), b) in flat_acc.iter().zip(&flat_sum).zip(&flat2) {
        assert_eq!(*a, *s + *b);
    }
}
