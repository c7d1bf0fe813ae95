// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;

use super::*;
use crate::interventions::{Segment, SpanRole, TokenTag};

fn vocab() -> Vocabulary {
    Vocabulary::new(4, 48, DelimiterStyle::QA).unwrap()
}

fn family() -> TaskFamily {
    TaskFamily::random(vocab(), 3, 10, &mut SeedRng::new(5)).unwrap()
}

fn small_corpus() -> Corpus {
    let cfg = CorpusConfig {
        pretrain_pool: 500,
        dev_pool: 100,
        adapt_train: 80,
        test_pool: 50,
        ..CorpusConfig::default()
    };
    Corpus::generate(&cfg, 11).unwrap()
}

#[test]
fn vocabulary_layout() {
    let v = vocab();
    assert_eq!(v.len(), 256);
    assert_eq!(v.render(&[0, 1, 2]).unwrap(), "<eoa> Q: A:");
    assert_eq!(v.word(v.source_word(7)).unwrap(), "s07");
    assert_eq!(v.word(v.target_word(3, 47)).unwrap(), "t3_47");
    assert_eq!(v.word(255).unwrap(), "t3_47");
    assert_eq!(v.render(&v.instruction(1)).unwrap(), "Translate L0 to L2 .");
    assert!(v.word(256).is_err());
    // every id renders to a distinct word that parses back
    let all: Vec<u32> = (0..256).collect();
    assert_eq!(v.parse(&v.render(&all).unwrap()).unwrap(), all);
    assert!(v.parse("t4_00").is_err());
    assert!(v.parse("s7").is_err());
}

#[test]
fn zero_shot_prompt_is_bare_query() {
    let v = vocab();
    let q = vec![v.source_word(1), v.source_word(2), v.source_word(3)];
    let spec = PromptSpec {
        instruction: None,
        examples: vec![],
        query_source: q.clone(),
        pair: 0,
    };
    let (tokens, spans) = format_prompt(&v, &spec, 512).unwrap();
    assert_eq!(v.render(&tokens).unwrap(), "Q: s01 s02 s03 A:");
    let roles: Vec<SpanRole> = spans.tags().iter().map(|t| t.role).collect();
    use SpanRole::*;
    assert_eq!(roles, vec![Delimiter, QuerySource, QuerySource, QuerySource, Delimiter]);
    let runs = spans.runs();
    assert_eq!(runs.iter().map(|r| r.role).collect::<Vec<_>>(), vec![Delimiter, QuerySource, Delimiter]);
}

#[test]
fn instruction_tokens_are_tagged() {
    let v = vocab();
    let spec = PromptSpec {
        instruction: Some(2),
        examples: vec![],
        query_source: vec![v.source_word(0); 3],
        pair: 2,
    };
    let (tokens, spans) = format_prompt(&v, &spec, 512).unwrap();
    assert_eq!(v.render(&tokens).unwrap(), "Translate L0 to L3 . Q: s00 s00 s00 A:");
    for p in 0..5 {
        assert_eq!(spans.tag(p), TokenTag::new(SpanRole::Instruction, Segment::Instruction));
    }
    assert_eq!(spans.role(5), SpanRole::Delimiter);
    assert_eq!(spans.tag(9).segment, Segment::Query);
}

/// Recovers roles by scanning for delimiter ids, without the formatter.
fn scan_roles(tokens: &[u32]) -> Vec<SpanRole> {
    let mut roles = Vec::new();
    let mut state = SpanRole::Instruction;
    let qs: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] == Vocabulary::Q).collect();
    let last_q = *qs.last().unwrap();
    for (i, &t) in tokens.iter().enumerate() {
        match t {
            Vocabulary::Q => {
                roles.push(SpanRole::Delimiter);
                state = if i == last_q { SpanRole::QuerySource } else { SpanRole::ExampleSource };
            }
            Vocabulary::A => {
                roles.push(SpanRole::Delimiter);
                state = SpanRole::ExampleTarget;
            }
            Vocabulary::EOA => roles.push(SpanRole::Delimiter),
            _ => roles.push(state),
        }
    }
    roles
}

#[test]
fn two_shot_spans_match_delimiter_scan() {
    let f = family();
    let corpus = small_corpus();
    let mut rng = SeedRng::new(3);
    for instruction in [false, true] {
        for _ in 0..20 {
            let pair = f.sample_pair(&mut rng);
            let ep = sample_episode(
                &f,
                pair,
                2,
                instruction,
                corpus.pool(PoolKind::Test),
                corpus.pool(PoolKind::Dev),
                &mut rng,
            )
            .unwrap();
            let (tokens, spans) = ep.format(&f.vocab, 512).unwrap();
            let got: Vec<SpanRole> = spans.tags().iter().map(|t| t.role).collect();
            assert_eq!(got, scan_roles(&tokens));
            // example segments cover exactly the two blocks
            let ex0 = spans.positions_where(|t| t.segment == Segment::Example(0)).len();
            let ex1 = spans.positions_where(|t| t.segment == Segment::Example(1)).len();
            assert_eq!(ex0, 2 * ep.prompt.examples[0].0.len() + 3);
            assert_eq!(ex1, 2 * ep.prompt.examples[1].0.len() + 3);
        }
    }
}

#[test]
fn prompt_overflow_is_an_error() {
    let v = vocab();
    let spec = PromptSpec {
        instruction: Some(0),
        examples: vec![(vec![v.source_word(0); 10], vec![v.target_word(0, 0); 10]); 5],
        query_source: vec![v.source_word(0); 10],
        pair: 0,
    };
    let (tokens, _) = format_prompt(&v, &spec, 512).unwrap();
    assert_eq!(tokens.len(), 5 + 5 * 23 + 12);
    assert!(matches!(
        format_prompt(&v, &spec, tokens.len() - 1),
        Err(Error::PromptTooLong { .. })
    ));
}

#[test]
fn identity_family_renames_the_alphabet() {
    let v = vocab();
    let f = TaskFamily::identity(v.clone(), 3, 10).unwrap();
    let src: Vec<u32> = [5, 0, 47].iter().map(|&i| v.source_word(i)).collect();
    assert_eq!(f.translate(2, &src).unwrap(), [5, 0, 47].map(|i| v.target_word(2, i)).to_vec());
    assert!(f.translate(0, &[Vocabulary::Q]).is_err());
}

#[test]
fn random_maps_are_bijections_with_inverses() {
    let f = family();
    let v = &f.vocab;
    for p in 0..4 {
        let mut images: Vec<u32> = (0..48).map(|i| f.map_word(p, v.source_word(i)).unwrap()).collect();
        for (i, &t) in images.iter().enumerate() {
            assert!(v.in_target_vocab(p, t));
            assert_eq!(f.invert_word(p, t), Some(v.source_word(i)));
        }
        images.sort_unstable();
        images.dedup();
        assert_eq!(images.len(), 48);
    }
    let bad = vec![vec![0; 48]; 4];
    assert!(TaskFamily::from_maps(v.clone(), bad, 3, 10).is_err());
}

#[test]
fn sampled_examples_follow_the_pair() {
    let f = family();
    let corpus = small_corpus();
    let mut rng = SeedRng::new(8);
    for _ in 0..200 {
        let pair = f.sample_pair(&mut rng);
        let k = rng.range_inclusive(0, 5);
        let ep = sample_episode(&f, pair, k, false, corpus.pool(PoolKind::Test), corpus.pool(PoolKind::Dev), &mut rng)
            .unwrap();
        assert_eq!(ep.prompt.k(), k);
        for (src, tgt) in &ep.prompt.examples {
            assert!(corpus.pool(PoolKind::Dev).contains(src));
            assert_eq!(src.len(), tgt.len());
            for (s, t) in src.iter().zip(tgt) {
                assert_eq!(f.map_word(pair, *s), Some(*t));
            }
        }
        assert_eq!(ep.gold, f.translate(pair, &ep.prompt.query_source).unwrap());
        assert!(corpus.pool(PoolKind::Test).contains(&ep.prompt.query_source));
    }
}

#[test]
fn pair_draws_are_uniform_within_five_percent() {
    let f = family();
    let mut rng = SeedRng::new(21);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[f.sample_pair(&mut rng)] += 1;
    }
    for c in counts {
        let rel = (c as f64 - 2500.0).abs() / 2500.0;
        assert!(rel <= 0.05, "{counts:?}");
    }
}

#[test]
fn pools_are_disjoint_and_reproducible() {
    let a = small_corpus();
    let b = small_corpus();
    assert_eq!(a, b);
    a.verify_disjoint().unwrap();
    assert_eq!(a.pool(PoolKind::Pretrain).len(), 500);
    assert_eq!(a.adapt_split().0.len(), 80);
    assert_eq!(a.adapt_split().1.len(), 20);
    for s in a.pool(PoolKind::Test) {
        assert!((3..=10).contains(&s.len()));
    }
    assert_ne!(a.pool_digest(PoolKind::Dev), a.pool_digest(PoolKind::Test));
    let c = Corpus::generate(&a.config, 12).unwrap();
    assert_ne!(a.pool_digest(PoolKind::Test), c.pool_digest(PoolKind::Test));
}

#[test]
fn test_episodes_share_examples_across_k() {
    let c = small_corpus();
    let five = c.test_episodes(5, true, Some(12), 1).unwrap();
    let one = c.test_episodes(1, true, Some(12), 1).unwrap();
    for (a, b) in five.iter().zip(&one) {
        assert_eq!(a.prompt.examples[..1], b.prompt.examples[..]);
        assert_eq!(a.prompt.query_source, b.prompt.query_source);
        assert_eq!(a.pair, b.pair);
    }
    assert_eq!(five.iter().filter(|e| e.pair == 3).count(), 3);
}

#[test]
fn training_sequence_targets() {
    let v = vocab();
    let f = TaskFamily::identity(v.clone(), 3, 10).unwrap();
    let src = vec![v.source_word(1), v.source_word(2), v.source_word(3)];
    let tgt = f.translate(1, &src).unwrap();
    let spec = PromptSpec {
        instruction: None,
        examples: vec![(src.clone(), tgt.clone())],
        query_source: src.clone(),
        pair: 1,
    };
    let q = format_training_sequence(&v, &spec, &tgt, LossScope::QueryAnswer, 512).unwrap();
    assert_eq!(
        v.render(&q.tokens).unwrap(),
        "Q: s01 s02 s03 A: t1_01 t1_02 t1_03 <eoa> Q: s01 s02 s03 A: t1_01 t1_02 t1_03 <eoa>"
    );
    assert_eq!(q.targets, vec![14, 15, 16, 17]);
    assert!(q.targets.iter().all(|&p| q.spans.role(p) == SpanRole::Generated));
    let all = format_training_sequence(&v, &spec, &tgt, LossScope::AllAnswers, 512).unwrap();
    assert_eq!(all.targets, vec![5, 6, 7, 8, 14, 15, 16, 17]);
}

#[test]
fn jsonl_round_trip() {
    let c = small_corpus();
    let eps = c.test_episodes(2, true, Some(5), 4).unwrap();
    let recs: Vec<EpisodeRecord> = eps.iter().map(|e| EpisodeRecord::from_episode(e, c.vocab(), 512).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps.jsonl");
    EpisodeRecord::dump_jsonl(&recs, &path).unwrap();
    let back = EpisodeRecord::load_jsonl(&path).unwrap();
    assert_eq!(back, recs);
    for (r, e) in back.iter().zip(&eps) {
        let (tokens, spans) = e.format(c.vocab(), 512).unwrap();
        assert_eq!(r.tokens, tokens);
        assert_eq!(r.spans().unwrap(), spans);
    }
}

proptest! {
    #[test]
    fn spans_partition_and_text_round_trips(
        seed in any::<u64>(),
        k in 0usize..6,
        instruction in any::<bool>(),
        names in any::<bool>(),
    ) {
        let style = if names { DelimiterStyle::LanguageNames } else { DelimiterStyle::QA };
        let v = Vocabulary::new(4, 48, style).unwrap();
        let f = TaskFamily::random(v.clone(), 3, 10, &mut SeedRng::new(seed)).unwrap();
        let mut rng = SeedRng::new(seed ^ 1);
        let pool: Vec<Vec<u32>> = (0..20).map(|_| f.sample_sentence(&mut rng)).collect();
        let pair = f.sample_pair(&mut rng);
        let ep = sample_episode(&f, pair, k, instruction, &pool, &pool, &mut rng).unwrap();
        let (tokens, spans) = ep.format(&v, 512).unwrap();
        prop_assert_eq!(tokens.len(), spans.len());
        let runs = spans.runs();
        prop_assert_eq!(runs.iter().map(|r| r.len).sum::<usize>(), tokens.len());
        prop_assert_eq!(SpanMap::from_runs(&runs).unwrap(), spans.clone());
        let text = v.render(&tokens).unwrap();
        prop_assert_eq!(v.parse(&text).unwrap(), tokens.clone());
        prop_assert_eq!(v.render(&v.parse(&text).unwrap()).unwrap(), text);
        // context is exactly instruction plus example blocks
        let context = spans.positions_where(|t| t.is_context()).len();
        let blocks: usize = ep.prompt.examples.iter().map(|(s, t)| s.len() + t.len() + 3).sum();
        prop_assert_eq!(context, blocks + if instruction { 5 } else { 0 });
    }
}
