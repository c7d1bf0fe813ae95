// SPDX-License-Identifier: MIT OR Apache-2.0

use std::borrow::Cow;

use super::*;
use crate::model::{DecodeOptions, LoraAdapter};
use crate::numerics::Tape;
use crate::prompting::{CorpusConfig, Vocabulary};

fn tiny_corpus(n_pairs: usize, pretrain_pool: usize) -> Corpus {
    let cfg = CorpusConfig {
        n_pairs,
        subvocab: 8,
        min_len: 3,
        max_len: 4,
        pretrain_pool,
        dev_pool: 40,
        adapt_train: 32,
        test_pool: 8,
        ..CorpusConfig::default()
    };
    Corpus::generate(&cfg, 3).unwrap()
}

fn tiny_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab,
        max_positions: 128,
        positional: crate::model::Positional::LearnedAbsolute,
        tie_embeddings: true,
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = PretrainConfig {
        steps: 110,
        warmup_steps: 10,
        lr: 1.0,
        min_lr_fraction: 0.1,
        ..PretrainConfig::default()
    };
    assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
    assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
    assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
    assert!((cfg.lr_at(60) - 0.55).abs() < 1e-12);
    assert!((cfg.lr_at(110) - 0.1).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let corpus = tiny_corpus(2, 50);
    let mc = tiny_model_config(corpus.vocab().len());
    let cfg = PretrainConfig {
        steps: 3,
        batch_size: 4,
        lr: 0.0,
        ..PretrainConfig::default()
    };
    let out = pretrain(&corpus, &mc, &cfg, 9).unwrap();
    let init = Transformer::init(mc, &mut SeedRng::new(9).derive_label("init")).unwrap();
    assert_eq!(out.model, init);
}

#[test]
fn pretraining_is_deterministic() {
    let corpus = tiny_corpus(2, 50);
    let mc = tiny_model_config(corpus.vocab().len());
    let cfg = PretrainConfig {
        steps: 4,
        batch_size: 4,
        position_jitter: 5,
        ..PretrainConfig::default()
    };
    let a = pretrain(&corpus, &mc, &cfg, 2).unwrap();
    let b = pretrain(&corpus, &mc, &cfg, 2).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn single_episode_is_memorized() {
    // one pair, one sentence, always instructed: every draw is the same episode
    let corpus = tiny_corpus(1, 1);
    let mc = tiny_model_config(corpus.vocab().len());
    let cfg = PretrainConfig {
        steps: 200,
        batch_size: 2,
        lr: 1e-2,
        warmup_steps: 10,
        max_k: 0,
        instruction_prob: 1.0,
        loss_scope: LossScope::QueryAnswer,
        ..PretrainConfig::default()
    };
    let out = pretrain(&corpus, &mc, &cfg, 4).unwrap();
    assert!(*out.losses.last().unwrap() < 1e-2, "{:?}", &out.losses[190..]);
    let ep = pretrain_episode(&corpus, &cfg, &mut SeedRng::new(0)).unwrap();
    let (tokens, spans) = ep.format(corpus.vocab(), 128).unwrap();
    let decode = DecodeOptions {
        max_new_tokens: 10,
        stop_token: Some(Vocabulary::EOA),
        eviction: false,
    };
    let gen = out.model.generate(&tokens, &spans, &InterventionSpec::none(), &decode).unwrap();
    assert_eq!(gen.tokens, ep.gold);
    assert!(gen.stopped);
}

#[test]
fn unspecified_task_copies_the_query() {
    let corpus = tiny_corpus(2, 50);
    let cfg = PretrainConfig {
        max_k: 0,
        instruction_prob: 0.0,
        ..PretrainConfig::default()
    };
    let ep = pretrain_episode(&corpus, &cfg, &mut SeedRng::new(1)).unwrap();
    assert_eq!(ep.gold, ep.prompt.query_source);
    let cfg = PretrainConfig {
        copy_when_unspecified: false,
        ..cfg
    };
    let ep = pretrain_episode(&corpus, &cfg, &mut SeedRng::new(1)).unwrap();
    assert_eq!(ep.gold, corpus.family.translate(ep.pair, &ep.prompt.query_source).unwrap());
}

#[test]
fn exploding_updates_abort_with_divergence() {
    let corpus = tiny_corpus(2, 50);
    let mc = tiny_model_config(corpus.vocab().len());
    let cfg = PretrainConfig {
        steps: 50,
        batch_size: 2,
        lr: 1e30,
        warmup_steps: 0,
        grad_clip: 0.0,
        ..PretrainConfig::default()
    };
    match pretrain(&corpus, &mc, &cfg, 1) {
        Err(Error::Divergence { step, loss }) => assert!(!loss.is_finite() && step > 0),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.losses)),
    }
}

// ---- hard-concrete gates ---------------------------------------------------

#[test]
fn closed_gate_limit() {
    let la = Tensor::full(&[2, 3], -40.0f64);
    let mut rng = SeedRng::new(1);
    for _ in 0..1000 {
        assert!(sample_gate(&la, &mut rng).data().iter().all(|&g| g == 0.0));
    }
    assert!(expected_l0(&la) < 1e-15);
}

#[test]
fn expected_l0_closed_form_at_zero() {
    let want = 1.0 / (1.0 + ((2.0 / 3.0) * (0.1f64 / 1.1).ln()).exp());
    assert!((want - 0.8318).abs() < 1e-4, "{want}");
    assert!((expected_l0(&Tensor::full(&[1], 0.0f64)) - want).abs() < 1e-12);
}

#[test]
fn monte_carlo_open_probability_matches_expected_l0() {
    for la in [-2.0, 0.0, 2.0] {
        let t = Tensor::full(&[1], la);
        let mut rng = SeedRng::new(17);
        let n = 100_000;
        let open = (0..n).filter(|_| sample_gate(&t, &mut rng).data()[0] > 0.0).count();
        let mc = open as f64 / n as f64;
        assert!((mc - expected_l0(&t)).abs() <= 1e-2, "logα {la}: {mc} vs {}", expected_l0(&t));
    }
}

#[test]
fn expected_l0_gradient_matches_finite_differences() {
    let la = Tensor::new(vec![2, 2], vec![-1.5, 0.0, 0.7, 2.5]).unwrap();
    let mut tape: Tape<'_, f64> = Tape::new();
    let v = tape.leaf(Cow::Borrowed(&la), true);
    let l0 = record_expected_l0(&mut tape, v);
    assert!((tape.value(l0).data()[0] - expected_l0(&la)).abs() < 1e-12);
    let g = tape.backward(l0).unwrap().take(v).unwrap();
    let h = 1e-5;
    for i in 0..4 {
        let (mut p, mut m) = (la.clone(), la.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let fd = (expected_l0(&p) - expected_l0(&m)) / (2.0 * h);
        assert!((fd - g.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{i}: {fd} vs {}", g.data()[i]);
    }
}

#[test]
fn initial_gates_evaluate_to_exactly_one() {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    assert!(GATE_INIT_LOG_ALPHA >= logit(11.0 / 12.0));
    assert!((logit(11.0 / 12.0) - 2.398).abs() < 1e-3);
    let g = HardConcreteGates::new(4, 4, 0.01);
    assert!(g.eval_gates().iter().flatten().all(|&x| x == 1.0));
    assert!(g.masked_heads().is_empty());
}

#[test]
fn masked_heads_lists_exact_zeros() {
    let mut g = HardConcreteGates::new(2, 2, 0.0);
    g.log_alpha.data_mut()[1] = -3.0; // sigmoid(-3)·1.2 − 0.1 < 0
    g.log_alpha.data_mut()[2] = -2.0; // sigmoid(-2)·1.2 − 0.1 > 0
    assert_eq!(g.masked_heads(), vec![(1, 1)]);
    assert!(g.eval_gates()[1][0] > 0.0);
}

proptest::proptest! {
    #[test]
    fn sampled_gates_stay_in_unit_interval(seed in proptest::prelude::any::<u64>(), la in -10.0f64..10.0) {
        let t = Tensor::full(&[8], la);
        let s = sample_gate(&t, &mut SeedRng::new(seed));
        proptest::prop_assert!(s.data().iter().all(|&g| (0.0..=1.0).contains(&g)));
    }
}

// ---- adapters and gate training -----------------------------------------

fn tiny_trained() -> (Corpus, Transformer) {
    let corpus = tiny_corpus(2, 60);
    let mc = tiny_model_config(corpus.vocab().len());
    let cfg = PretrainConfig {
        steps: 30,
        batch_size: 4,
        ..PretrainConfig::default()
    };
    let model = pretrain(&corpus, &mc, &cfg, 5).unwrap().model;
    (corpus, model)
}

#[test]
fn lora_starts_at_base_and_freezes_base() {
    let (corpus, base) = tiny_trained();
    let cfg = LoraConfig {
        rank: 4,
        alpha: 4.0,
        max_epochs: 2,
        batch_size: 8,
        lr: 1e-2,
        ..LoraConfig::default()
    };
    let out = train_lora_layer(&base, &corpus, 2, &cfg, 1).unwrap();
    // zero-init: epoch-0 dev NLL is the base model's, exactly
    let (_, dev_pool) = corpus.adapt_split();
    let dev: Vec<TrainingSequence> = dev_pool
        .iter()
        .map(|q| {
            let ep = Episode {
                pair: 0,
                prompt: crate::prompting::PromptSpec {
                    instruction: None,
                    examples: vec![],
                    query_source: q.clone(),
                    pair: 0,
                },
                gold: corpus.family.translate(0, q).unwrap(),
            };
            ep.training_sequence(corpus.vocab(), LossScope::QueryAnswer, 128).unwrap()
        })
        .collect();
    assert_eq!(out.dev_nll[0], base.target_nll(&dev, &InterventionSpec::none()).unwrap());
    assert_eq!(out.dev_nll.len(), 3);
    assert!(out.adapter.b.data().iter().any(|&v| v != 0.0));
    // the adapted copy carries the base weights untouched
    let mut adapted = base.clone();
    adapted.attach_lora(2, out.adapter.clone()).unwrap();
    assert_eq!(adapted.weights, base.weights);
    assert!(matches!(
        train_lora_layer(&base, &corpus, 3, &cfg, 1),
        Err(Error::LayerOutOfRange { layer: 3, n_layers: 2 })
    ));
}

#[test]
fn zero_adapter_is_bit_identical_to_base() {
    let (corpus, base) = tiny_trained();
    let mut adapted = base.clone();
    let a = LoraAdapter::init(16, 4, 4.0, 0.1, &mut SeedRng::new(2)).unwrap();
    adapted.attach_lora(1, a).unwrap();
    let eps = corpus.test_episodes(2, true, None, 1).unwrap();
    for ep in &eps {
        let (tokens, spans) = ep.format(corpus.vocab(), 128).unwrap();
        let x = base.forward(&tokens, &spans, &InterventionSpec::none(), None).unwrap();
        let y = adapted.forward(&tokens, &spans, &InterventionSpec::none(), None).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn gate_training_starts_at_ungated_base() {
    let (corpus, base) = tiny_trained();
    let cfg = GateConfig {
        lambda: 0.0,
        max_epochs: 1,
        batch_size: 16,
        ..GateConfig::default()
    };
    let out = train_gates(&base, &corpus, &cfg, 3).unwrap();
    let (_, dev_pool) = corpus.adapt_split();
    let dev: Vec<TrainingSequence> = gate_episodes(&corpus, dev_pool, GateRegime::ZeroPrompt, true, 3 ^ 1)
        .unwrap()
        .iter()
        .map(|e| e.training_sequence(corpus.vocab(), LossScope::QueryAnswer, 128).unwrap())
        .collect();
    let base_nll = base.target_nll(&dev, &InterventionSpec::none()).unwrap();
    assert_eq!(out.dev_nll[0], base_nll);
    // λ = 0: the objective is the NLL alone
    assert_eq!(out.dev_objective, out.dev_nll);
    assert_eq!(out.dev_nll.len(), 2);
}

#[test]
fn penalty_closes_gates_without_data_signal() {
    let (corpus, base) = tiny_trained();
    let cfg = GateConfig {
        lambda: 1.0,
        lr: 0.2,
        max_epochs: 4,
        batch_size: 16,
        patience: 10,
        ..GateConfig::default()
    };
    let out = train_gates(&base, &corpus, &cfg, 3).unwrap();
    let g = &out.gates;
    assert!(g.expected_l0() < HardConcreteGates::new(2, 2, 0.0).expected_l0());
}

#[test]
fn adapter_and_gate_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = LoraAdapter::init(16, 4, 4.0, 0.1, &mut SeedRng::new(2)).unwrap();
    let p = dir.path().join("a.iclm");
    save_lora(&a, 2, &p).unwrap();
    assert_eq!(load_lora(&p).unwrap(), (a, 2));
    let mut g = HardConcreteGates::new(2, 3, 0.01);
    g.log_alpha.data_mut()[4] = -1.25;
    let q = dir.path().join("g.iclm");
    save_gates(&g, &q).unwrap();
    assert_eq!(load_gates(&q).unwrap(), g);
    assert!(matches!(load_gates(&p), Err(Error::Format { .. })));
    assert!(matches!(load_lora(&q), Err(Error::Format { .. })));
}
