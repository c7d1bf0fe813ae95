// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batch_gradients, check_finite, sequence_gradients, EarlyStopper, Objective};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::interventions::InterventionSpec;
use crate::model::{ArtifactKind, Container, LoraAdapter, ParamId, TrainingSequence, Transformer};
use crate::numerics::{AdamState, SeedRng};
use crate::prompting::{Corpus, Episode, LossScope, PromptSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub threshold: f64,
    /// Translation direction the adapter is trained on.
    pub pair: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: 32.0,
            dropout: 0.1,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            threshold: 0.001,
            pair: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraOutcome {
    pub layer: usize,
    pub adapter: LoraAdapter,
    /// Dev NLL per evaluation; entry 0 is before any update.
    pub dev_nll: Vec<f64>,
    /// Index into `dev_nll` of the returned adapter.
    pub best_epoch: usize,
    /// Greedy dev metrics of the base model with the returned adapter.
    pub dev_report: EvalReport,
}

/// Zero-shot, instruction-free episodes for one pair.
fn bare_episodes(corpus: &Corpus, pool: &[Vec<u32>], pair: usize) -> Result<Vec<Episode>> {
    pool.iter()
        .map(|q| {
            Ok(Episode {
                pair,
                prompt: PromptSpec {
                    instruction: None,
                    examples: vec![],
                    query_source: q.clone(),
                    pair,
                },
                gold: corpus.family.translate(pair, q)?,
            })
        })
        .collect()
}

/// Trains a LoRA adapter on layer `layer` (1-based) of a frozen base model
/// and returns the checkpoint with the lowest dev NLL.
pub fn train_lora_layer(base: &Transformer, corpus: &Corpus, layer: usize, cfg: &LoraConfig, seed: u64) -> Result<LoraOutcome> {
    let n_layers = base.config.n_layers;
    if layer == 0 || layer > n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers });
    }
    if cfg.pair >= corpus.family.n_pairs() || cfg.batch_size == 0 {
        return Err(Error::Config("LoRA pair or batch size out of range".into()));
    }
    let vocab = corpus.vocab();
    let max_pos = base.config.max_positions;
    let (train_pool, dev_pool) = corpus.adapt_split();
    let train_eps = bare_episodes(corpus, train_pool, cfg.pair)?;
    let dev_eps = bare_episodes(corpus, dev_pool, cfg.pair)?;
    let to_seqs = |eps: &[Episode]| -> Result<Vec<TrainingSequence>> {
        eps.iter()
            .map(|e| e.training_sequence(vocab, LossScope::QueryAnswer, max_pos))
            .collect()
    };
    let train = to_seqs(&train_eps)?;
    let dev = to_seqs(&dev_eps)?;

    let root = SeedRng::new(seed).derive_label("lora").derive(layer as u64);
    let mut model = base.clone();
    model.lora.clear();
    let adapter = LoraAdapter::init(base.config.d_model, cfg.rank, cfg.alpha, cfg.dropout, &mut root.derive_label("init"))?;
    model.attach_lora(layer, adapter)?;
    let ids = [ParamId::LoraA(layer - 1), ParamId::LoraB(layer - 1)];
    let mut opt_a = AdamState::new(model.lora[&layer].a.shape(), cfg.lr);
    let mut opt_b = AdamState::new(model.lora[&layer].b.shape(), cfg.lr);
    let spec = InterventionSpec::none();

    let mut stopper = EarlyStopper::new(cfg.patience, cfg.threshold, Objective::Minimize);
    let mut dev_nll = vec![model.target_nll(&dev, &spec)?];
    stopper.observe(dev_nll[0]);
    let mut best = model.lora[&layer].clone();
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let erng = root.derive(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        erng.derive_label("order").shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let n_total: usize = chunk.iter().map(|&i| train[i].targets.len()).sum();
            let brng = erng.derive(b as u64);
            let (loss, mut grads) = batch_gradients(chunk.len(), |j| {
                let seq = &train[chunk[j]];
                let mut drop = brng.derive(j as u64);
                let w = seq.targets.len() as f64 / n_total as f64;
                sequence_gradients(&model, seq, &spec, &ids, w, 0, Some(&mut drop))
            })?;
            check_finite(step, loss)?;
            step += 1;
            let adapter = model.lora.get_mut(&layer).expect("attached");
            opt_a.step(&mut adapter.a, &mut grads.remove(&ids[0]))?;
            opt_b.step(&mut adapter.b, &mut grads.remove(&ids[1]))?;
        }
        let nll = model.target_nll(&dev, &spec)?;
        check_finite(step, nll)?;
        dev_nll.push(nll);
        if stopper.observe(nll) {
            best = model.lora[&layer].clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let best_epoch = stopper.best().map_or(0, |(i, _)| i);
    model.lora.insert(layer, best.clone());
    let max_new = corpus.family.max_len + 2;
    let dev_report = evaluate(&model, &dev_eps, &spec, vocab, max_new)?.report;
    Ok(LoraOutcome {
        layer,
        adapter: best,
        dev_nll,
        best_epoch,
        dev_report,
    })
}

/// One adapter per layer, trained independently.
pub fn lora_scan(base: &Transformer, corpus: &Corpus, cfg: &LoraConfig, seed: u64) -> Result<Vec<LoraOutcome>> {
    (1..=base.config.n_layers)
        .into_par_iter()
        .map(|layer| train_lora_layer(base, corpus, layer, cfg, seed))
        .collect()
}

pub fn save_lora(adapter: &LoraAdapter, layer: usize, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "layer": layer,
        "rank": adapter.rank(),
        "alpha": adapter.alpha,
        "dropout": adapter.dropout,
    });
    let mut c = Container::new(ArtifactKind::Lora, meta);
    c.push("lora.a", adapter.a.clone());
    c.push("lora.b", adapter.b.clone());
    c.save(path)
}

/// Returns the adapter and its 1-based layer.
pub fn load_lora(path: &Path) -> Result<(LoraAdapter, usize)> {
    let c = Container::load(path)?;
    if c.kind != ArtifactKind::Lora {
        return Err(Error::Format {
            offset: 16,
            detail: format!("expected a LoRA artifact, found {:?}", c.kind),
        });
    }
    let layer = c.meta["layer"].as_u64().ok_or_else(|| Error::Format {
        offset: 16,
        detail: "LoRA header lacks a layer".into(),
    })? as usize;
    let adapter = LoraAdapter {
        a: c.get("lora.a")?.clone(),
        b: c.get("lora.b")?.clone(),
        alpha: c.meta["alpha"].as_f64().unwrap_or(32.0),
        dropout: c.meta["dropout"].as_f64().unwrap_or(0.0),
    };
    Ok((adapter, layer))
}
