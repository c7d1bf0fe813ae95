// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::model::{ModelConfig, Positional};
use crate::numerics::SeedRng;
use crate::prompting::{Corpus, CorpusConfig};

fn setup() -> (Corpus, Transformer) {
    let cfg = CorpusConfig {
        pretrain_pool: 50,
        dev_pool: 40,
        adapt_train: 32,
        test_pool: 12,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&cfg, 2).unwrap();
    let mc = ModelConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: corpus.vocab().len(),
        max_positions: 128,
        positional: Positional::LearnedAbsolute,
        tie_embeddings: true,
    };
    let model = Transformer::init(mc, &mut SeedRng::new(8)).unwrap();
    (corpus, model)
}

#[test]
fn formula_values() {
    assert_eq!(savings_formula(32, 14, 5).unwrap(), 0.46875);
    assert_eq!(savings_formula(32, 32, 5).unwrap(), 0.0);
    assert_eq!(savings_formula(32, 14, 0).unwrap(), 0.0);
    assert_eq!(savings_formula(4, 1, 1).unwrap(), 0.375);
    assert!(savings_formula(32, 0, 5).is_err());
    assert!(savings_formula(32, 33, 5).is_err());
}

#[test]
fn top_layer_eviction_is_the_baseline() {
    let (corpus, model) = setup();
    let ep = &corpus.test_episodes(5, true, Some(3), 1).unwrap()[0];
    let (tokens, spans) = ep.format(corpus.vocab(), 128).unwrap();
    let run = run_evicted(&model, &tokens, &spans, MaskVariant::InstrAndExMask, 5, 6).unwrap();
    let base = model
        .generate(&tokens, &spans, &InterventionSpec::none(), &decode_options(6, false))
        .unwrap();
    assert_eq!(run.tokens, base.tokens);
    assert_eq!(run.generation.step_logits, base.step_logits);
    assert_eq!(run.cost.baseline_attention_pairs, run.cost.evicted_attention_pairs);
    assert_eq!(run.cost.measured_savings_fraction, 0.0);
    assert_eq!(run.cost.formula_savings_fraction, 0.0);
    assert_eq!(run.cost.layer_matched_formula_fraction, 0.0);
}

#[test]
fn eviction_matches_masked_reference() {
    let (corpus, model) = setup();
    for k in [1, 5] {
        for ep in corpus.test_episodes(k, true, Some(4), 3).unwrap() {
            let (tokens, spans) = ep.format(corpus.vocab(), 128).unwrap();
            for variant in MaskVariant::ALL {
                for r in 1..=5 {
                    let run = run_evicted(&model, &tokens, &spans, variant, r, 6).unwrap();
                    let eq = check_against_masked(&model, &tokens, &spans, &run, 6).unwrap();
                    assert!(eq.tokens_identical, "{variant} r={r} k={k}");
                    assert!(eq.max_abs_logit_diff <= 1e-5, "{variant} r={r}: {}", eq.max_abs_logit_diff);
                    let c = &run.cost;
                    assert_eq!(c.k, k);
                    assert!(c.evicted_total() <= c.baseline_total());
                    if r <= 4 && c.evicted_positions > 0 {
                        assert!(c.evicted_total() < c.baseline_total());
                    }
                    for (l, &e) in c.evicted_kv_entries.iter().enumerate() {
                        let want = if l + 1 >= r { tokens.len() - c.evicted_positions } else { tokens.len() };
                        assert_eq!(e, want, "{variant} r={r} layer {}", l + 1);
                    }
                    assert!((0.0..=1.0).contains(&c.measured_savings_fraction));
                    assert!((0.0..=1.0).contains(&c.kv_savings_fraction));
                }
            }
        }
    }
}

#[test]
fn kv_savings_track_the_token_weighted_fraction() {
    let (corpus, model) = setup();
    let ep = &corpus.test_episodes(5, true, Some(1), 4).unwrap()[0];
    let (tokens, spans) = ep.format(corpus.vocab(), 128).unwrap();
    let run = run_evicted(&model, &tokens, &spans, MaskVariant::InstrAndExMask, 3, 4).unwrap();
    assert!((run.cost.kv_savings_fraction - run.cost.token_weighted_fraction).abs() < 1e-12);
    assert_eq!(run.cost.layer_matched_formula_fraction, 0.5 * 5.0 / 6.0);
    assert_eq!(run.cost.formula_savings_fraction, 0.25 * 5.0 / 6.0);
}

#[test]
fn out_of_range_layer_is_rejected() {
    let (corpus, model) = setup();
    let ep = &corpus.test_episodes(1, false, Some(1), 4).unwrap()[0];
    let (tokens, spans) = ep.format(corpus.vocab(), 128).unwrap();
    for r in [0, 6] {
        assert!(matches!(
            run_evicted(&model, &tokens, &spans, MaskVariant::ExMask, r, 4),
            Err(Error::LayerOutOfRange { .. })
        ));
    }
}

#[test]
fn example_blocks_are_counted() {
    let (corpus, _) = setup();
    for k in 0..=5 {
        let ep = &corpus.test_episodes(k, k % 2 == 0, Some(1), 4).unwrap()[0];
        let (_, spans) = ep.format(corpus.vocab(), 128).unwrap();
        assert_eq!(count_examples(&spans), k);
    }
}
