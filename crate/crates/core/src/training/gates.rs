// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{batch_gradients, check_finite, EarlyStopper, Objective};
use crate::error::{Error, Result};
use crate::interventions::InterventionSpec;
use crate::model::{ArtifactKind, Container, ParamId, Recorder, TrainableExtras, TrainingSequence, Transformer};
use crate::numerics::{sigmoid, AdamState, Scalar, SeedRng, Tape, Tensor, Var};
use crate::prompting::{sample_episode, Corpus, Episode, LossScope};

/// Lower stretch limit.
pub const GATE_GAMMA: f64 = -0.1;
/// Upper stretch limit.
pub const GATE_ZETA: f64 = 1.1;
/// Concrete temperature.
pub const GATE_BETA: f64 = 2.0 / 3.0;
/// Smallest round value above `logit(11/12)`, so every evaluation gate
/// starts at exactly 1.
pub const GATE_INIT_LOG_ALPHA: f64 = 2.5;

fn stretch<T: Scalar>(s: T) -> T {
    let v = s * T::from_f64(GATE_ZETA - GATE_GAMMA) + T::from_f64(GATE_GAMMA);
    v.max(T::zero()).min(T::one())
}

/// One stochastic gate matrix with `u ~ Uniform(0, 1)` per entry.
pub fn sample_gate<T: Scalar>(log_alpha: &Tensor<T>, rng: &mut SeedRng) -> Tensor<T> {
    let noise: Tensor<T> = logistic_noise(log_alpha.shape(), rng);
    let data = log_alpha
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&la, &n)| stretch(sigmoid((n + la) / T::from_f64(GATE_BETA))))
        .collect();
    Tensor::new(log_alpha.shape().to_vec(), data).expect("same shape")
}

/// `Σ sigmoid(logα − β · ln(−γ/ζ))`, the expected number of open gates.
pub fn expected_l0<T: Scalar>(log_alpha: &Tensor<T>) -> f64 {
    let shift = GATE_BETA * (-GATE_GAMMA / GATE_ZETA).ln();
    log_alpha
        .data()
        .iter()
        .map(|&la| sigmoid(la.as_f64() - shift))
        .sum()
}

/// Records sampled gates for `log_alpha` given logistic `noise`
/// (`ln u − ln(1−u)` per entry).
pub fn record_sampled_gates<T: Scalar>(tape: &mut Tape<'_, T>, log_alpha: Var, noise: Tensor<T>) -> Result<Var> {
    let n = tape.constant(noise);
    let x = tape.add(log_alpha, n)?;
    let x = tape.affine(x, T::from_f64(1.0 / GATE_BETA), T::zero());
    let s = tape.sigmoid(x);
    let g = tape.affine(s, T::from_f64(GATE_ZETA - GATE_GAMMA), T::from_f64(GATE_GAMMA));
    Ok(tape.clamp01_straight_through(g))
}

pub fn record_expected_l0<T: Scalar>(tape: &mut Tape<'_, T>, log_alpha: Var) -> Var {
    let shift = GATE_BETA * (-GATE_GAMMA / GATE_ZETA).ln();
    let x = tape.affine(log_alpha, T::one(), T::from_f64(-shift));
    let s = tape.sigmoid(x);
    tape.sum(s)
}

pub fn logistic_noise<T: Scalar>(shape: &[usize], rng: &mut SeedRng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u = rng.uniform_open();
            T::from_f64(u.ln() - (1.0 - u).ln())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Per-head gate parameters, `[n_layers × n_heads]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HardConcreteGates {
    pub log_alpha: Tensor,
    pub lambda: f64,
}

impl HardConcreteGates {
    pub fn new(n_layers: usize, n_heads: usize, lambda: f64) -> Self {
        Self {
            log_alpha: Tensor::full(&[n_layers, n_heads], GATE_INIT_LOG_ALPHA as f32),
            lambda,
        }
    }

    /// Deterministic gates `clamp(sigmoid(logα)·(ζ−γ)+γ, 0, 1)`, row per layer.
    pub fn eval_gates(&self) -> Vec<Vec<f64>> {
        let (rows, _) = self.log_alpha.dims2();
        (0..rows)
            .map(|l| {
                self.log_alpha
                    .row(l)
                    .iter()
                    .map(|&la| stretch(sigmoid(la as f64)))
                    .collect()
            })
            .collect()
    }

    /// `(layer, head)` pairs, 1-based layer, whose evaluation gate is exactly 0.
    pub fn masked_heads(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (l, row) in self.eval_gates().iter().enumerate() {
            for (h, &g) in row.iter().enumerate() {
                if g == 0.0 {
                    out.push((l + 1, h));
                }
            }
        }
        out
    }

    pub fn expected_l0(&self) -> f64 {
        expected_l0(&self.log_alpha)
    }

    pub fn spec(&self) -> InterventionSpec {
        InterventionSpec::none().with_gates(self.eval_gates())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRegime {
    /// Instruction and query only.
    #[default]
    ZeroPrompt,
    /// Instruction, five examples and the query.
    FivePrompt,
}

impl GateRegime {
    pub fn k(self) -> usize {
        match self {
            GateRegime::ZeroPrompt => 0,
            GateRegime::FivePrompt => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub threshold: f64,
    pub regime: GateRegime,
    /// Pair every training query with every direction instead of one.
    pub all_pairs: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            threshold: 0.01,
            regime: GateRegime::ZeroPrompt,
            all_pairs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub gates: HardConcreteGates,
    /// Dev objective (NLL plus `λ · expected_l0`) per evaluation; entry 0 is
    /// before any update.
    pub dev_objective: Vec<f64>,
    pub dev_nll: Vec<f64>,
    pub best_epoch: usize,
    pub masked_heads: Vec<(usize, usize)>,
}

/// Episodes for the gate regime over `pool`.
pub fn gate_episodes(corpus: &Corpus, pool: &[Vec<u32>], regime: GateRegime, all_pairs: bool, seed: u64) -> Result<Vec<Episode>> {
    let p = corpus.family.n_pairs();
    let root = SeedRng::new(seed).derive_label("gate-episodes");
    let mut out = Vec::new();
    for (i, q) in pool.iter().enumerate() {
        let pairs: Vec<usize> = if all_pairs { (0..p).collect() } else { vec![i % p] };
        for pair in pairs {
            let mut rng = root.derive((i * p + pair) as u64);
            let examples = corpus.pool(crate::prompting::PoolKind::Dev);
            out.push(sample_episode(
                &corpus.family,
                pair,
                regime.k(),
                true,
                std::slice::from_ref(q),
                examples,
                &mut rng,
            )?);
        }
    }
    Ok(out)
}

/// Learns head gates on a frozen base model with the objective
/// `NLL + λ · expected_l0`, early-stopped on that same objective over the
/// dev split.
pub fn train_gates(base: &Transformer, corpus: &Corpus, cfg: &GateConfig, seed: u64) -> Result<GateOutcome> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::Config(format!("gate lambda {} / batch {}", cfg.lambda, cfg.batch_size)));
    }
    let (n_layers, n_heads) = (base.config.n_layers, base.config.n_heads);
    let vocab = corpus.vocab();
    let max_pos = base.config.max_positions;
    let (train_pool, dev_pool) = corpus.adapt_split();
    let seqs = |eps: Vec<Episode>| -> Result<Vec<TrainingSequence>> {
        eps.iter()
            .map(|e| e.training_sequence(vocab, LossScope::QueryAnswer, max_pos))
            .collect()
    };
    let train = seqs(gate_episodes(corpus, train_pool, cfg.regime, cfg.all_pairs, seed)?)?;
    let dev = seqs(gate_episodes(corpus, dev_pool, cfg.regime, cfg.all_pairs, seed ^ 1)?)?;

    let mut gates = HardConcreteGates::new(n_layers, n_heads, cfg.lambda);
    let mut opt = AdamState::new(gates.log_alpha.shape(), cfg.lr);
    let root = SeedRng::new(seed).derive_label("gates");
    let objective = |g: &HardConcreteGates| -> Result<(f64, f64)> {
        let nll = base.target_nll(&dev, &g.spec())?;
        Ok((nll, nll + cfg.lambda * g.expected_l0()))
    };
    let (nll0, obj0) = objective(&gates)?;
    let mut dev_nll = vec![nll0];
    let mut dev_objective = vec![obj0];
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.threshold, Objective::Minimize);
    stopper.observe(obj0);
    let mut best = gates.clone();
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let erng = root.derive(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        erng.derive_label("order").shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let n_total: usize = chunk.iter().map(|&i| train[i].targets.len()).sum();
            let brng = erng.derive(b as u64);
            let log_alpha = &gates.log_alpha;
            let (loss, mut grads) = batch_gradients(chunk.len(), |j| {
                let seq = &train[chunk[j]];
                let mut rec = Recorder::new([]);
                let la = rec.external(ParamId::GateLogAlpha, log_alpha);
                let noise = logistic_noise(log_alpha.shape(), &mut brng.derive(j as u64));
                let z = record_sampled_gates(&mut rec.tape, la, noise)?;
                let per_head: Vec<Var> = (0..n_layers * n_heads)
                    .map(|i| rec.tape.select(z, i))
                    .collect::<Result<_>>()?;
                let extras = TrainableExtras {
                    gates: Some(&per_head),
                    dropout: None,
                };
                let w = seq.targets.len() as f64 / n_total as f64;
                let loss = base.record_loss(&mut rec, seq, &InterventionSpec::none(), extras, 0, w)?;
                let value = rec.tape.value(loss).data()[0] as f64;
                Ok((value, rec.gradients(loss)?))
            })?;
            check_finite(step, loss)?;
            step += 1;
            let mut g = grads
                .remove(&ParamId::GateLogAlpha)
                .unwrap_or_else(|| Tensor::zeros(gates.log_alpha.shape()));
            if cfg.lambda > 0.0 {
                let mut tape: Tape<'_, f32> = Tape::new();
                let la = tape.leaf(std::borrow::Cow::Borrowed(&gates.log_alpha), true);
                let l0 = record_expected_l0(&mut tape, la);
                let pen = tape.scale(l0, cfg.lambda as f32);
                let mut pg = tape.backward(pen)?;
                g.add_assign(&pg.take(la).expect("leaf gradient"))?;
            }
            opt.step(&mut gates.log_alpha, &mut Some(g))?;
        }
        let (nll, obj) = objective(&gates)?;
        check_finite(step, obj)?;
        dev_nll.push(nll);
        dev_objective.push(obj);
        if stopper.observe(obj) {
            best = gates.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let masked_heads = best.masked_heads();
    Ok(GateOutcome {
        best_epoch: stopper.best().map_or(0, |(i, _)| i),
        gates: best,
        dev_objective,
        dev_nll,
        masked_heads,
    })
}

pub fn save_gates(gates: &HardConcreteGates, path: &Path) -> Result<()> {
    let (l, h) = gates.log_alpha.dims2();
    let meta = serde_json::json!({ "n_layers": l, "n_heads": h, "lambda": gates.lambda });
    let mut c = Container::new(ArtifactKind::Gates, meta);
    c.push(ParamId::GateLogAlpha.to_string(), gates.log_alpha.clone());
    c.save(path)
}

pub fn load_gates(path: &Path) -> Result<HardConcreteGates> {
    let c = Container::load(path)?;
    if c.kind != ArtifactKind::Gates {
        return Err(Error::Format {
            offset: 16,
            detail: format!("expected a gate artifact, found {:?}", c.kind),
        });
    }
    Ok(HardConcreteGates {
        log_alpha: c.get(&ParamId::GateLogAlpha.to_string())?.clone(),
        lambda: c.meta["lambda"].as_f64().unwrap_or(0.0),
    })
}
