// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pretraining of the toy model, per-layer LoRA adaptation and hard-concrete
//! head-gate learning.

mod gates;
mod lora;
mod stopper;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gates::{
    expected_l0, gate_episodes, load_gates, logistic_noise, record_expected_l0, record_sampled_gates,
    sample_gate, save_gates, train_gates, GateConfig, GateOutcome, GateRegime, HardConcreteGates, GATE_BETA,
    GATE_GAMMA, GATE_INIT_LOG_ALPHA, GATE_ZETA,
};
pub use lora::{load_lora, lora_scan, save_lora, train_lora_layer, LoraConfig, LoraOutcome};
pub use stopper::{EarlyStopper, Objective};

use crate::error::{Error, Result};
use crate::interventions::InterventionSpec;
use crate::model::{ModelConfig, ParamId, Recorder, TrainableExtras, TrainingSequence, Transformer};
use crate::numerics::{AdamState, SeedRng, Tensor};
use crate::prompting::{sample_episode, Corpus, Episode, LossScope, PoolKind};

/// Pretraining hyperparameters and episode mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub min_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Example count is drawn uniformly from `0..=max_k`.
    pub max_k: usize,
    pub instruction_prob: f64,
    pub loss_scope: LossScope,
    /// With neither examples nor an instruction the task is unknown; the
    /// target is then the query itself.
    pub copy_when_unspecified: bool,
    /// Each sequence starts at a random position offset in `0..=position_jitter`.
    pub position_jitter: usize,
    /// Second-moment decay of the pretraining optimizer.
    pub adam_beta2: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 100,
            min_lr_fraction: 0.1,
            grad_clip: 1.0,
            max_k: 5,
            instruction_prob: 0.5,
            loss_scope: LossScope::AllAnswers,
            copy_when_unspecified: true,
            position_jitter: 0,
            adam_beta2: crate::numerics::ADAM_BETA2,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.instruction_prob) {
            return Err(Error::Config("instruction_prob outside [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config(format!("adam_beta2 {} outside [0, 1)", self.adam_beta2)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let t = (step - self.warmup_steps) as f64 / span as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
        self.lr * (self.min_lr_fraction + (1.0 - self.min_lr_fraction) * cos)
    }
}

/// Draws one pretraining episode from the pretraining pool.
pub fn pretrain_episode(corpus: &Corpus, cfg: &PretrainConfig, rng: &mut SeedRng) -> Result<Episode> {
    let pool = corpus.pool(PoolKind::Pretrain);
    let pair = corpus.family.sample_pair(rng);
    let k = rng.range_inclusive(0, cfg.max_k);
    let instruction = rng.uniform() < cfg.instruction_prob;
    let mut ep = sample_episode(&corpus.family, pair, k, instruction, pool, pool, rng)?;
    if k == 0 && !instruction && cfg.copy_when_unspecified {
        ep.gold = ep.prompt.query_source.clone();
    }
    Ok(ep)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Transformer,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Weighted gradient for a batch: item `i` contributes `loss_i` with weight
/// `n_i / N`, so the sum is the pooled mean over target tokens. Items run in
/// parallel; their gradients are summed in index order.
pub(crate) fn batch_gradients<F>(n_items: usize, item: F) -> Result<(f64, BTreeMap<ParamId, Tensor>)>
where
    F: Fn(usize) -> Result<(f64, BTreeMap<ParamId, Tensor>)> + Sync,
{
    let parts: Vec<Result<(f64, BTreeMap<ParamId, Tensor>)>> = (0..n_items).into_par_iter().map(&item).collect();
    let mut loss = 0.0;
    let mut total: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    for part in parts {
        let (l, grads) = part?;
        loss += l;
        for (id, g) in grads {
            match total.get_mut(&id) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    total.insert(id, g);
                }
            }
        }
    }
    Ok((loss, total))
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub(crate) fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

pub(crate) fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

/// Loss and gradients of one sequence against the model's own parameters.
pub(crate) fn sequence_gradients(
    model: &Transformer,
    seq: &TrainingSequence,
    spec: &InterventionSpec,
    trainable: &[ParamId],
    weight: f64,
    position_offset: usize,
    dropout: Option<&mut SeedRng>,
) -> Result<(f64, BTreeMap<ParamId, Tensor>)> {
    let mut rec = Recorder::new(trainable.iter().copied());
    let extras = TrainableExtras { gates: None, dropout };
    let loss = model.record_loss(&mut rec, seq, spec, extras, position_offset, weight)?;
    let value = rec.tape.value(loss).data()[0] as f64;
    Ok((value, rec.gradients(loss)?))
}

/// Trains a fresh model on the corpus' pretraining pool.
pub fn pretrain(corpus: &Corpus, model_config: &ModelConfig, cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model_config.validate()?;
    if model_config.vocab_size != corpus.vocab().len() {
        return Err(Error::Config(format!(
            "model vocab {} but corpus vocab {}",
            model_config.vocab_size,
            corpus.vocab().len()
        )));
    }
    corpus.verify_disjoint()?;
    let root = SeedRng::new(seed);
    let mut model = Transformer::init(model_config.clone(), &mut root.derive_label("init"))?;
    let ids = model.weights.param_ids();
    let mut opt: BTreeMap<ParamId, AdamState> = ids
        .iter()
        .map(|&id| {
            let mut st = AdamState::new(model.weights.get(id).expect("listed").shape(), cfg.lr);
            st.beta2 = cfg.adam_beta2;
            (id, st)
        })
        .collect();
    let data_rng = root.derive_label("episodes");
    let spec = InterventionSpec::none();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let step_rng = data_rng.derive(step as u64);
        let batch: Vec<(TrainingSequence, usize)> = (0..cfg.batch_size)
            .map(|b| {
                let mut rng = step_rng.derive(b as u64);
                let ep = pretrain_episode(corpus, cfg, &mut rng)?;
                let seq = ep.training_sequence(corpus.vocab(), cfg.loss_scope, model_config.max_positions)?;
                let max_offset = model_config.max_positions - seq.tokens.len();
                let offset = rng.range_inclusive(0, cfg.position_jitter.min(max_offset));
                Ok((seq, offset))
            })
            .collect::<Result<_>>()?;
        let n_total: usize = batch.iter().map(|(s, _)| s.targets.len()).sum();
        let (loss, mut grads) = batch_gradients(batch.len(), |i| {
            let (seq, offset) = &batch[i];
            let w = seq.targets.len() as f64 / n_total as f64;
            sequence_gradients(&model, seq, &spec, &ids, w, *offset, None)
        })?;
        check_finite(step, loss)?;
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        for (id, g) in grads {
            let state = opt.get_mut(&id).expect("state per parameter");
            state.lr = lr;
            state.step(model.weights.get_mut(id).expect("listed"), &mut Some(g))?;
        }
        losses.push(loss);
    }
    Ok(PretrainOutcome { model, losses })
}

#[cfg(test)]
mod tests;
