// SPDX-License-Identifier: MIT OR Apache-2.0

//! Context eviction from the KV cache and its counted cost.
//!
//! Once every query ignores the context from layer `r` upward, those keys
//! and values never need to exist there. [`run_evicted`] drops them and
//! reports exact counter-based savings next to the closed-form estimate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{InterventionSpec, MaskVariant, Segment, SpanMap};
use crate::model::{DecodeOptions, Generation, Transformer};
use crate::prompting::Vocabulary;

/// `(n_layers − r) / n_layers × k / (k + 1)`.
pub fn savings_formula(n_layers: usize, r: usize, k: usize) -> Result<f64> {
    if n_layers == 0 || r < 1 || r > n_layers {
        return Err(Error::LayerOutOfRange { layer: r, n_layers });
    }
    Ok((n_layers - r) as f64 / n_layers as f64 * (k as f64 / (k + 1) as f64))
}

/// Counted costs of one evicted generation against the unmodified run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_layers: usize,
    pub from_layer: usize,
    pub variant: MaskVariant,
    /// Number of example blocks in the prompt.
    pub k: usize,
    pub prompt_len: usize,
    /// Prompt positions in the evicted role set.
    pub evicted_positions: usize,
    pub generated_tokens: usize,
    pub baseline_attention_pairs: Vec<u64>,
    pub evicted_attention_pairs: Vec<u64>,
    /// Cache entries per layer right after the prompt is consumed.
    pub baseline_kv_entries: Vec<usize>,
    pub evicted_kv_entries: Vec<usize>,
    /// `1 − evicted / baseline` over all attention score evaluations.
    pub measured_savings_fraction: f64,
    /// `1 − evicted / baseline` over prompt cache entries.
    pub kv_savings_fraction: f64,
    /// [`savings_formula`] at `(n_layers, from_layer, k)`; zero past the top.
    pub formula_savings_fraction: f64,
    /// The formula with the layer count matched to eviction at `from_layer`
    /// inclusive: `(n_layers − r + 1) / n_layers × k / (k + 1)`.
    pub layer_matched_formula_fraction: f64,
    /// Evicted layers over all layers, times evicted prompt positions over
    /// prompt length.
    pub token_weighted_fraction: f64,
}

impl CostReport {
    pub fn baseline_total(&self) -> u64 {
        self.baseline_attention_pairs.iter().sum()
    }

    pub fn evicted_total(&self) -> u64 {
        self.evicted_attention_pairs.iter().sum()
    }
}

/// Output of [`run_evicted`].
#[derive(Debug, Clone)]
pub struct EvictedRun {
    pub tokens: Vec<u32>,
    pub generation: Generation,
    pub cost: CostReport,
}

/// Number of distinct example blocks tagged in `spans`.
pub fn count_examples(spans: &SpanMap) -> usize {
    spans
        .tags()
        .iter()
        .filter_map(|t| match t.segment {
            Segment::Example(i) => Some(i),
            _ => None,
        })
        .collect::<BTreeSet<_>>()
        .len()
}

fn decode_options(max_new: usize, eviction: bool) -> DecodeOptions {
    DecodeOptions {
        max_new_tokens: max_new,
        stop_token: Some(Vocabulary::EOA),
        eviction,
    }
}

fn fraction_saved(evicted: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (1.0 - evicted / baseline).clamp(0.0, 1.0)
    }
}

/// Greedy generation with the `variant` role set evicted from the cache at
/// layers `r..=n_layers`. `r = n_layers + 1` evicts nothing.
pub fn run_evicted(
    model: &Transformer,
    prompt: &[u32],
    spans: &SpanMap,
    variant: MaskVariant,
    r: usize,
    max_new: usize,
) -> Result<EvictedRun> {
    let n = model.config.n_layers;
    if r < 1 || r > n + 1 {
        return Err(Error::LayerOutOfRange { layer: r, n_layers: n });
    }
    let baseline = model.generate(prompt, spans, &InterventionSpec::none(), &decode_options(max_new, false))?;
    let evicted = model.generate(
        prompt,
        spans,
        &InterventionSpec::context_mask(variant, r),
        &decode_options(max_new, true),
    )?;

    let k = count_examples(spans);
    let covered = (0..spans.len()).filter(|&p| variant.covers(spans.tag(p))).count();
    let saved_layers = (n + 1 - r) as f64 / n as f64;
    let kv_base: usize = baseline.prompt_cache_entries.iter().sum();
    let kv_evicted: usize = evicted.prompt_cache_entries.iter().sum();
    let cost = CostReport {
        n_layers: n,
        from_layer: r,
        variant,
        k,
        prompt_len: prompt.len(),
        evicted_positions: covered,
        generated_tokens: evicted.tokens.len(),
        measured_savings_fraction: fraction_saved(
            evicted.counters.total_attention_pairs() as f64,
            baseline.counters.total_attention_pairs() as f64,
        ),
        kv_savings_fraction: fraction_saved(kv_evicted as f64, kv_base as f64),
        formula_savings_fraction: if r <= n { savings_formula(n, r, k)? } else { 0.0 },
        layer_matched_formula_fraction: saved_layers * (k as f64 / (k + 1) as f64),
        token_weighted_fraction: saved_layers * covered as f64 / prompt.len() as f64,
        baseline_attention_pairs: baseline.counters.attention_pairs.clone(),
        evicted_attention_pairs: evicted.counters.attention_pairs.clone(),
        baseline_kv_entries: baseline.prompt_cache_entries.clone(),
        evicted_kv_entries: evicted.prompt_cache_entries.clone(),
    };
    Ok(EvictedRun {
        tokens: evicted.tokens.clone(),
        generation: evicted,
        cost,
    })
}

/// Agreement between an evicted run and the masked full-cache reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub tokens_identical: bool,
    /// Over every decoding step both runs produced.
    pub max_abs_logit_diff: f64,
}

/// Replays `run` against the masked reference with `from_layer = r`.
pub fn check_against_masked(
    model: &Transformer,
    prompt: &[u32],
    spans: &SpanMap,
    run: &EvictedRun,
    max_new: usize,
) -> Result<Equivalence> {
    let spec = InterventionSpec::context_mask(run.cost.variant, run.cost.from_layer);
    let reference = model.generate(prompt, spans, &spec, &decode_options(max_new, false))?;
    let mut diff = 0.0f64;
    for (a, b) in reference.step_logits.iter().zip(&run.generation.step_logits) {
        for (x, y) in a.iter().zip(b) {
            diff = diff.max((*x as f64 - *y as f64).abs());
        }
    }
    let same_steps = reference.step_logits.len() == run.generation.step_logits.len();
    Ok(Equivalence {
        tokens_identical: same_steps && reference.tokens == run.tokens && reference.stopped == run.generation.stopped,
        max_abs_logit_diff: diff,
    })
}

#[cfg(test)]
mod tests;
