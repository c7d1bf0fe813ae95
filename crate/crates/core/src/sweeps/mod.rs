// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer sweeps over a trained model and their curve summaries.
//!
//! Every point of one curve decodes the same episode list, checked by hash,
//! so curves differ only by the intervention applied.

mod curves;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::interventions::{InterventionSpec, MaskVariant};
use crate::model::Transformer;
use crate::prompting::{Corpus, Episode, EpisodeRecord, Vocabulary};
use crate::training::LoraOutcome;

pub use curves::{detect_plateau, median_smooth, phase_segments, Interval, Phases, PhaseOptions, Plateau};
pub use report::{write_gate_grid, Metric, SweepKind, SweepPoint, SweepReport};

/// Shared knobs of every sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    /// Test items per point; `None` uses the whole test pool.
    #[serde(default)]
    pub n_test: Option<usize>,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
}

fn default_max_new() -> usize {
    16
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_test: None,
            max_new_tokens: default_max_new(),
        }
    }
}

/// SHA-256 over the serialized episodes a point decodes.
pub fn episodes_digest(episodes: &[Episode], vocab: &Vocabulary, max_positions: usize) -> Result<String> {
    let mut h = Sha256::new();
    for ep in episodes {
        let rec = EpisodeRecord::from_episode(ep, vocab, max_positions)?;
        h.update(serde_json::to_vec(&rec)?);
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// SHA-256 of the model's checkpoint bytes.
pub fn model_digest(model: &Transformer) -> Result<String> {
    let bytes = model.to_container()?.to_bytes()?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct PointJob {
    kind: SweepKind,
    variant: Option<MaskVariant>,
    layer: Option<usize>,
    k: usize,
    instruction: bool,
    spec: InterventionSpec,
}

fn run_jobs(
    model: &Transformer,
    corpus: &Corpus,
    jobs: Vec<PointJob>,
    seed: u64,
    opts: &SweepOptions,
) -> Result<Vec<SweepPoint>> {
    let vocab = corpus.vocab();
    let max_pos = model.config.max_positions;
    // episodes depend only on (k, instruction); build each list once
    let mut lists: Vec<((usize, bool), Vec<Episode>, String)> = Vec::new();
    for job in &jobs {
        let key = (job.k, job.instruction);
        if !lists.iter().any(|(k, _, _)| *k == key) {
            let eps = corpus.test_episodes(job.k, job.instruction, opts.n_test, seed)?;
            let digest = episodes_digest(&eps, vocab, max_pos)?;
            lists.push((key, eps, digest));
        }
    }
    jobs.into_par_iter()
        .map(|job| {
            let (_, eps, digest) = lists
                .iter()
                .find(|(k, _, _)| *k == (job.k, job.instruction))
                .expect("episode list built above");
            let eval = evaluate(model, eps, &job.spec, vocab, opts.max_new_tokens)?;
            // paired design: the list decoded is the list hashed
            debug_assert_eq!(&episodes_digest(eps, vocab, max_pos)?, digest);
            Ok(SweepPoint {
                kind: job.kind,
                variant: job.variant,
                layer: job.layer,
                k: job.k,
                instruction: job.instruction,
                seed,
                episodes_hash: digest.clone(),
                metrics: eval.report,
            })
        })
        .collect()
}

fn baselines(k: usize) -> Vec<PointJob> {
    [true, false]
        .into_iter()
        .map(|instruction| PointJob {
            kind: SweepKind::Baseline,
            variant: None,
            layer: None,
            k,
            instruction,
            spec: InterventionSpec::none(),
        })
        .collect()
}

fn mask_jobs(n_layers: usize, variant: MaskVariant, k: usize) -> Vec<PointJob> {
    (1..=n_layers + 1)
        .map(|from| PointJob {
            kind: SweepKind::ContextMask,
            variant: Some(variant),
            layer: Some(from),
            k,
            instruction: variant.uses_instruction(),
            spec: InterventionSpec::context_mask(variant, from),
        })
        .collect()
}

/// One point per `from_layer ∈ [1, n_layers + 1]` plus unmasked baselines
/// with and without the instruction.
pub fn sweep_context_mask(
    model: &Transformer,
    corpus: &Corpus,
    variant: MaskVariant,
    k: usize,
    seed: u64,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let mut jobs = mask_jobs(model.config.n_layers, variant, k);
    jobs.extend(baselines(k));
    let points = run_jobs(model, corpus, jobs, seed, opts)?;
    SweepReport::assemble("context_mask", model, seed, points)
}

/// The full-input masking control.
pub fn sweep_input(model: &Transformer, corpus: &Corpus, k: usize, seed: u64, opts: &SweepOptions) -> Result<SweepReport> {
    let mut report = sweep_context_mask(model, corpus, MaskVariant::InputMask, k, seed, opts)?;
    report.name = "input_mask".into();
    Ok(report)
}

/// Regimes of the layer-wise ablation sweep, as `(k, instruction)`.
pub const LAYER_MASK_REGIMES: [(usize, bool); 3] = [(0, true), (5, true), (5, false)];

/// Single-layer attention ablations `j ∈ [1, n_layers]` under each regime,
/// plus the unablated point (`layer = None`) of every regime.
pub fn sweep_layer_mask(
    model: &Transformer,
    corpus: &Corpus,
    regimes: &[(usize, bool)],
    seed: u64,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if regimes.iter().any(|&(k, instr)| k == 0 && !instr) {
        return Err(Error::Config("the regime with no examples and no instruction carries no task".into()));
    }
    let n = model.config.n_layers;
    let jobs = regimes
        .iter()
        .flat_map(|&(k, instruction)| {
            std::iter::once(None).chain((1..=n).map(Some)).map(move |layer| PointJob {
                kind: SweepKind::LayerMask,
                variant: None,
                layer,
                k,
                instruction,
                spec: layer.map_or_else(InterventionSpec::none, |j| InterventionSpec::ablate([j])),
            })
        })
        .collect();
    let points = run_jobs(model, corpus, jobs, seed, opts)?;
    SweepReport::assemble("layer_mask", model, seed, points)
}

/// Context-mask curves for several example counts under one variant.
pub fn sweep_prompts(
    model: &Transformer,
    corpus: &Corpus,
    variant: MaskVariant,
    ks: &[usize],
    seed: u64,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let n = model.config.n_layers;
    let mut jobs = Vec::new();
    for &k in ks {
        jobs.extend(mask_jobs(n, variant, k));
        jobs.extend(baselines(k));
    }
    let points = run_jobs(model, corpus, jobs, seed, opts)?;
    SweepReport::assemble("prompts", model, seed, points)
}

/// Metric drop `Δ(j) = baseline − ablated(j)` for `j = 1..=n_layers` under
/// one regime of a layer-mask report.
pub fn ablation_drops(report: &SweepReport, k: usize, instruction: bool, metric: Metric) -> Result<Vec<f64>> {
    let find = |layer: Option<usize>| {
        report
            .points
            .iter()
            .find(|p| p.kind == SweepKind::LayerMask && p.k == k && p.instruction == instruction && p.layer == layer)
            .map(|p| metric.of(&p.metrics))
            .ok_or_else(|| Error::Contract(format!("layer-mask report lacks k={k} instruction={instruction} layer {layer:?}")))
    };
    let base = find(None)?;
    (1..=report.n_layers).map(|j| Ok(base - find(Some(j))?)).collect()
}

/// 1-based layer with the largest drop; ties go to the lowest layer.
pub fn argmax_drop(drops: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &d) in drops.iter().enumerate() {
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((i + 1, d));
        }
    }
    best.map(|(l, _)| l)
}

/// Per-layer adapter scan as a report; `layer` is the adapted layer.
pub fn lora_report(model: &Transformer, outcomes: &[LoraOutcome], seed: u64, episodes_hash: &str) -> Result<SweepReport> {
    let points = outcomes
        .iter()
        .map(|o| SweepPoint {
            kind: SweepKind::LoraScan,
            variant: None,
            layer: Some(o.layer),
            k: 0,
            instruction: false,
            seed,
            episodes_hash: episodes_hash.to_string(),
            metrics: o.dev_report.clone(),
        })
        .collect();
    SweepReport::assemble("lora_scan", model, seed, points)
}

#[cfg(test)]
mod tests;
