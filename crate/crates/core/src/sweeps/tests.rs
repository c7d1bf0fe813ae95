// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;

use super::*;
use crate::model::{ModelConfig, Positional};
use crate::numerics::SeedRng;
use crate::prompting::CorpusConfig;
use crate::training::HardConcreteGates;

fn setup() -> (Corpus, Transformer) {
    let cfg = CorpusConfig {
        pretrain_pool: 50,
        dev_pool: 40,
        adapt_train: 32,
        test_pool: 8,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&cfg, 2).unwrap();
    let mc = ModelConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: corpus.vocab().len(),
        max_positions: 128,
        positional: Positional::LearnedAbsolute,
        tie_embeddings: true,
    };
    (corpus, Transformer::init(mc, &mut SeedRng::new(8)).unwrap())
}

fn opts() -> SweepOptions {
    SweepOptions {
        n_test: Some(6),
        max_new_tokens: 5,
    }
}

#[test]
fn plateau_examples() {
    assert_eq!(detect_plateau(&[5.0; 5], 1.0).unwrap(), Plateau { layer: 1, flagged: false });
    assert_eq!(detect_plateau(&[0.0, 0.0, 9.0, 9.0, 9.0], 1.0).unwrap().layer, 3);
    let p = detect_plateau(&[0.0, 1.0, 2.0, 3.0, 9.0], 1.0).unwrap();
    assert_eq!(p, Plateau { layer: 5, flagged: true });
    assert_eq!(detect_plateau(&[0.0, 8.5, 9.0], 1.0).unwrap().layer, 2);
    assert!(detect_plateau(&[], 1.0).is_err());
    assert!(detect_plateau(&[1.0], -1.0).is_err());
}

proptest! {
    #[test]
    fn plateau_is_monotone_in_tolerance(curve in prop::collection::vec(0.0f64..100.0, 1..12), a in 0.0f64..50.0, b in 0.0f64..50.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p_lo = detect_plateau(&curve, lo).unwrap().layer;
        let p_hi = detect_plateau(&curve, hi).unwrap().layer;
        prop_assert!(p_hi <= p_lo);
    }
}

#[test]
fn constant_curve_is_one_segment() {
    let ph = phase_segments(&[3.0; 6], &PhaseOptions::default()).unwrap();
    assert!(ph.degenerate);
    assert_eq!(ph.floor, Some(Interval { start: 1, end: 6 }));
    assert_eq!(ph.rise, None);
    assert_eq!(ph.plateau, None);
}

#[test]
fn ideal_step_segments() {
    for n_layers in 3..8 {
        for s in 2..=n_layers {
            let curve: Vec<f64> = (1..=n_layers + 1).map(|l| if l >= s { 40.0 } else { 0.0 }).collect();
            let ph = phase_segments(&curve, &PhaseOptions::default()).unwrap();
            assert!(!ph.degenerate);
            assert_eq!(ph.floor, Some(Interval { start: 1, end: s - 1 }), "n={n_layers} s={s}");
            assert_eq!(ph.rise, Some(Interval { start: s, end: s }));
            assert_eq!(ph.plateau, Some(Interval { start: s + 1, end: n_layers + 1 }));
        }
    }
}

#[test]
fn median_filter_removes_single_spikes() {
    let s = median_smooth(&[0.0, 0.0, 9.0, 0.0, 0.0], 3).unwrap();
    assert_eq!(s, vec![0.0; 5]);
    assert_eq!(median_smooth(&[1.0, 2.0, 3.0], 3).unwrap(), vec![1.0, 2.0, 3.0]);
    assert!(median_smooth(&[1.0], 2).is_err());
}

#[test]
fn golden_segmentation_fixture() {
    let text = include_str!("../../tests/fixtures/phase_segments.json");
    let cases: Vec<serde_json::Value> = serde_json::from_str(text).unwrap();
    assert!(!cases.is_empty());
    for case in cases {
        let curve: Vec<f64> = serde_json::from_value(case["curve"].clone()).unwrap();
        let want: Phases = serde_json::from_value(case["phases"].clone()).unwrap();
        let got = phase_segments(&curve, &PhaseOptions::default()).unwrap();
        assert_eq!(got, want, "{}", case["name"]);
    }
}

#[test]
fn context_sweep_shape_and_pairing() {
    let (corpus, model) = setup();
    let rep = sweep_context_mask(&model, &corpus, MaskVariant::InstrAndExMask, 2, 4, &opts()).unwrap();
    assert_eq!(rep.mask_points(MaskVariant::InstrAndExMask, 2).len(), 4);
    assert_eq!(rep.points.len(), 6);
    let hash = &rep.points[0].episodes_hash;
    assert!(rep.points.iter().filter(|p| p.instruction).all(|p| &p.episodes_hash == hash));
    // the top point masks nothing and equals the instructed baseline exactly
    let top = rep.mask_points(MaskVariant::InstrAndExMask, 2)[3];
    assert_eq!(top.metrics, rep.baseline(2, true).unwrap().metrics);
    assert_eq!(rep.curve(MaskVariant::InstrAndExMask, 2, Metric::Bleu).unwrap().len(), 4);
    assert!(rep.curve(MaskVariant::ExMask, 2, Metric::Bleu).is_err());
    assert_eq!(rep.model_hash, model_digest(&model).unwrap());
}

#[test]
fn sweeps_are_reproducible() {
    let (corpus, model) = setup();
    let a = sweep_prompts(&model, &corpus, MaskVariant::ExMask, &[1, 3], 9, &opts()).unwrap();
    let b = sweep_prompts(&model, &corpus, MaskVariant::ExMask, &[1, 3], 9, &opts()).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.points.len(), 2 * (4 + 2));
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    a.write_jsonl(&p).unwrap();
    b.write_jsonl(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    let c = dir.path().join("a.csv");
    a.write_csv(&c).unwrap();
    let rows = std::fs::read_to_string(&c).unwrap();
    assert_eq!(rows.lines().count(), 1 + a.points.len());
}

#[test]
fn layer_sweep_baselines_and_drops() {
    let (corpus, model) = setup();
    let rep = sweep_layer_mask(&model, &corpus, &LAYER_MASK_REGIMES, 4, &opts()).unwrap();
    assert_eq!(rep.points.len(), 3 * 4);
    let unablated = rep.points.iter().find(|p| p.layer.is_none() && p.k == 5 && p.instruction).unwrap();
    let plain = evaluate(
        &model,
        &corpus.test_episodes(5, true, Some(6), 4).unwrap(),
        &InterventionSpec::none(),
        corpus.vocab(),
        5,
    )
    .unwrap();
    assert_eq!(unablated.metrics, plain.report);
    let drops = ablation_drops(&rep, 5, true, Metric::SeqAccuracy).unwrap();
    assert_eq!(drops.len(), 3);
    assert!(sweep_layer_mask(&model, &corpus, &[(0, false)], 4, &opts()).is_err());
}

#[test]
fn argmax_drop_prefers_lowest_layer_on_ties() {
    assert_eq!(argmax_drop(&[0.1, 0.5, 0.5]), Some(2));
    assert_eq!(argmax_drop(&[-1.0, -2.0]), Some(1));
    assert_eq!(argmax_drop(&[]), None);
}

#[test]
fn gate_grid_dump() {
    let mut g = HardConcreteGates::new(2, 3, 0.0);
    g.log_alpha.data_mut()[4] = -40.0;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gates_grid.csv");
    write_gate_grid(&g, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "layer,head_1,head_2,head_3\n1,1,1,1\n2,1,0,1\n");
}
