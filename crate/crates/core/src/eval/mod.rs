// SPDX-License-Identifier: MIT OR Apache-2.0

//! Corpus BLEU over token ids and the synthetic task metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interventions::InterventionSpec;
use crate::model::{DecodeOptions, Transformer};
use crate::prompting::{Episode, Vocabulary};

/// Precision smoothing for [`corpus_bleu`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// `(matches + 1) / (total + 1)` for every order above unigrams.
    AddOne,
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Standard corpus BLEU on a 0–100 scale: clipped n-gram counts pooled over
/// the corpus, geometric mean of precisions up to `max_n`, times the brevity
/// penalty `exp(min(0, 1 - ref_len / hyp_len))`. Returns 0 when any pooled
/// precision is 0 and no smoothing is applied.
pub fn corpus_bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>], max_n: usize, smoothing: Smoothing) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() || max_n == 0 {
        return Err(Error::Contract("empty corpus".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if ref_len == 0 {
        return Err(Error::Contract("references are all empty".into()));
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = match smoothing {
            Smoothing::AddOne if n > 0 => (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0),
            _ => (matches[n] as f64, totals[n] as f64),
        };
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Metrics over one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub seq_accuracy: f64,
    /// Gold positions reproduced exactly at the same index, over gold length.
    pub token_accuracy: f64,
    /// Output tokens inside the gold pair's target subvocabulary, over all
    /// output tokens (0 when nothing was emitted).
    pub target_vocab_rate: f64,
    pub n_items: usize,
}

/// Scores greedy outputs against golds; `pairs[i]` is item `i`'s pair.
pub fn task_metrics(outputs: &[Vec<u32>], golds: &[Vec<u32>], pairs: &[usize], vocab: &Vocabulary) -> Result<EvalReport> {
    if outputs.len() != golds.len() || outputs.len() != pairs.len() {
        return Err(Error::Contract("misaligned evaluation lists".into()));
    }
    if outputs.is_empty() {
        return Err(Error::Contract("no evaluation items".into()));
    }
    let mut exact = 0usize;
    let (mut tok_hit, mut tok_total) = (0usize, 0usize);
    let (mut in_vocab, mut emitted) = (0usize, 0usize);
    for ((o, g), &p) in outputs.iter().zip(golds).zip(pairs) {
        exact += usize::from(o == g);
        tok_hit += o.iter().zip(g).filter(|(a, b)| a == b).count();
        tok_total += g.len();
        in_vocab += o.iter().filter(|&&t| vocab.in_target_vocab(p, t)).count();
        emitted += o.len();
    }
    let n = outputs.len();
    Ok(EvalReport {
        bleu: corpus_bleu(outputs, golds, 4, Smoothing::None)?,
        seq_accuracy: exact as f64 / n as f64,
        token_accuracy: if tok_total == 0 { 1.0 } else { tok_hit as f64 / tok_total as f64 },
        target_vocab_rate: if emitted == 0 { 0.0 } else { in_vocab as f64 / emitted as f64 },
        n_items: n,
    })
}

/// Greedy outputs for a list of episodes with their metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outputs: Vec<Vec<u32>>,
}

/// Decodes every episode greedily under `spec` (stopping at end-of-answer or
/// after `max_new_tokens`) and scores the outputs.
pub fn evaluate(
    model: &Transformer,
    episodes: &[Episode],
    spec: &InterventionSpec,
    vocab: &Vocabulary,
    max_new_tokens: usize,
) -> Result<Evaluation> {
    let decode = DecodeOptions {
        max_new_tokens,
        stop_token: Some(Vocabulary::EOA),
        eviction: false,
    };
    let outputs = episodes
        .par_iter()
        .map(|ep| {
            let (tokens, spans) = ep.format(vocab, model.config.max_positions)?;
            Ok(model.generate(&tokens, &spans, spec, &decode)?.tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<Vec<u32>> = episodes.iter().map(|e| e.gold.clone()).collect();
    let pairs: Vec<usize> = episodes.iter().map(|e| e.pair).collect();
    let report = task_metrics(&outputs, &golds, &pairs, vocab)?;
    Ok(Evaluation { report, outputs })
}
