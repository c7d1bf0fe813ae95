// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use super::graph::{Eager, Graph, Recorder};
use super::{KVCache, LayerParam, LoraAdapter, ModelConfig, ParamId, TransformerWeights};
use crate::error::{Error, Result};
use crate::interventions::{build_mask, InterventionSpec, SpanMap};
use crate::numerics::{ops, Scalar, SeedRng, Tensor, Var};

/// Work counters filled during a forward pass. Indexed by 0-based layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostCounters {
    /// Attention score evaluations, summed over heads.
    pub attention_pairs: Vec<u64>,
    /// Hidden rows pushed through each block.
    pub rows: Vec<u64>,
}

impl CostCounters {
    pub fn new(n_layers: usize) -> Self {
        Self {
            attention_pairs: vec![0; n_layers],
            rows: vec![0; n_layers],
        }
    }

    pub fn total_attention_pairs(&self) -> u64 {
        self.attention_pairs.iter().sum()
    }

    pub fn total_rows(&self) -> u64 {
        self.rows.iter().sum()
    }

    fn ensure(&mut self, n_layers: usize) {
        if self.rows.len() < n_layers {
            self.attention_pairs.resize(n_layers, 0);
            self.rows.resize(n_layers, 0);
        }
    }
}

/// Intermediate activations captured for inspection. Indexed by 0-based layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace<T = f32> {
    /// Concatenated head outputs entering `W_o`; `None` for ablated layers.
    pub pre_output_projection: Vec<Option<Tensor<T>>>,
    /// Residual stream after each block.
    pub residual: Vec<Tensor<T>>,
}

/// Optional behaviour of [`Transformer::forward_with`].
#[derive(Debug, Default)]
pub struct ForwardOptions<'a, T = f32> {
    /// Drop rows and cache entries of masked positions at masked layers.
    pub eviction: bool,
    pub counters: Option<&'a mut CostCounters>,
    pub trace: Option<&'a mut ForwardTrace<T>>,
    /// Added to every position index before the position-embedding lookup.
    pub position_offset: usize,
}

/// Logits of the rows that survived the pass, with their absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T = f32> {
    /// `[rows × vocab]`
    pub logits: Tensor<T>,
    pub positions: Vec<usize>,
}

/// Tokens with role tags and the positions whose token is a loss target.
///
/// A target at position `p` is predicted by the logits of row `p - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    pub spans: SpanMap,
    pub targets: Vec<usize>,
}

impl TrainingSequence {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.spans.len() {
            return Err(Error::Contract(format!(
                "{} tokens but {} span tags",
                self.tokens.len(),
                self.spans.len()
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Contract("training sequence has no targets".into()));
        }
        if let Some(&p) = self.targets.iter().find(|&&p| p == 0 || p >= self.tokens.len()) {
            return Err(Error::Contract(format!("target position {p} cannot be predicted")));
        }
        Ok(())
    }
}

/// Greedy decoding settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    pub stop_token: Option<u32>,
    pub eviction: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T = f32> {
    /// Emitted tokens, excluding the stop token.
    pub tokens: Vec<u32>,
    /// Logit row each decision was taken from.
    pub step_logits: Vec<Vec<T>>,
    pub stopped: bool,
    pub counters: CostCounters,
    /// Cache entries per layer right after the prompt was consumed.
    pub prompt_cache_entries: Vec<usize>,
}

/// Trainable pieces that are not base weights, passed to the tape path.
#[derive(Default)]
pub struct TrainableExtras<'a> {
    /// One `[1]`-shaped tape value per head, layer-major.
    pub gates: Option<&'a [Var]>,
    /// Source of LoRA dropout masks; `None` disables dropout.
    pub dropout: Option<&'a mut SeedRng>,
}

/// A decoder-only transformer with optional LoRA adapters keyed by 1-based
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T = f32> {
    pub config: ModelConfig,
    pub weights: TransformerWeights<T>,
    pub lora: BTreeMap<usize, LoraAdapter<T>>,
}

struct Pass<'a, 'c, V, T> {
    spec: &'a InterventionSpec,
    spans: &'a SpanMap,
    cache: Option<&'c mut KVCache<T>>,
    eviction: bool,
    gates: Option<&'a [V]>,
    dropout: Option<&'c mut SeedRng>,
    counters: Option<&'c mut CostCounters>,
    trace: Option<&'c mut ForwardTrace<T>>,
    position_offset: usize,
    /// Rows (by index among the input tokens) whose logits are needed.
    logit_rows: Option<&'a [usize]>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, weights: TransformerWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self {
            config,
            weights,
            lora: BTreeMap::new(),
        })
    }

    pub fn init(config: ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let weights = TransformerWeights::init(&config, rng);
        Self::new(config, weights)
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            weights: self.weights.cast(),
            lora: self
                .lora
                .iter()
                .map(|(&l, a)| {
                    (
                        l,
                        LoraAdapter {
                            a: a.a.cast(),
                            b: a.b.cast(),
                            alpha: a.alpha,
                            dropout: a.dropout,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn attach_lora(&mut self, layer: usize, adapter: LoraAdapter<T>) -> Result<()> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        let d = self.config.d_model;
        if adapter.a.shape() != [adapter.rank(), d] || adapter.b.shape() != [d, adapter.rank()] {
            return Err(Error::shape(
                "attach_lora",
                format!("A {:?}, B {:?} for d_model {d}", adapter.a.shape(), adapter.b.shape()),
            ));
        }
        self.lora.insert(layer, adapter);
        Ok(())
    }

    /// Full-sequence or incremental forward pass. With a cache, `tokens` are
    /// the new tokens and continue at `cache.next_position()`.
    pub fn forward(
        &self,
        tokens: &[u32],
        spans: &SpanMap,
        spec: &InterventionSpec,
        cache: Option<&mut KVCache<T>>,
    ) -> Result<Tensor<T>> {
        Ok(self
            .forward_with(tokens, spans, spec, cache, ForwardOptions::default())?
            .logits)
    }

    pub fn forward_with(
        &self,
        tokens: &[u32],
        spans: &SpanMap,
        spec: &InterventionSpec,
        cache: Option<&mut KVCache<T>>,
        opts: ForwardOptions<'_, T>,
    ) -> Result<ForwardOutput<T>> {
        let mut g = Eager;
        let pass = Pass {
            spec,
            spans,
            cache,
            eviction: opts.eviction,
            gates: None,
            dropout: None,
            counters: opts.counters,
            trace: opts.trace,
            position_offset: opts.position_offset,
            logit_rows: None,
        };
        let (logits, positions) = self.run(&mut g, tokens, pass)?;
        Ok(ForwardOutput {
            logits: logits.into_tensor(),
            positions,
        })
    }

    /// Greedy decoding with a KV cache. `spans` tags the prompt; generated
    /// tokens are tagged as generated.
    pub fn generate(
        &self,
        prompt: &[u32],
        spans: &SpanMap,
        spec: &InterventionSpec,
        decode: &DecodeOptions,
    ) -> Result<Generation<T>> {
        if prompt.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        if prompt.len() > self.config.max_positions {
            return Err(Error::PromptTooLong {
                len: prompt.len(),
                max: self.config.max_positions,
            });
        }
        if spans.len() != prompt.len() {
            return Err(Error::Contract(format!(
                "{} prompt tokens but {} span tags",
                prompt.len(),
                spans.len()
            )));
        }
        let mut spans = spans.clone();
        let mut cache = KVCache::new(&self.config);
        let mut counters = CostCounters::new(self.config.n_layers);
        let step = |tokens: &[u32], spans: &SpanMap, cache: &mut KVCache<T>, counters: &mut CostCounters| {
            self.forward_with(
                tokens,
                spans,
                spec,
                Some(cache),
                ForwardOptions {
                    eviction: decode.eviction,
                    counters: Some(counters),
                    ..ForwardOptions::default()
                },
            )
        };
        let mut out = step(prompt, &spans, &mut cache, &mut counters)?;
        let prompt_cache_entries = cache.entry_counts();
        let mut generation = Generation {
            tokens: Vec::new(),
            step_logits: Vec::new(),
            stopped: false,
            counters: CostCounters::default(),
            prompt_cache_entries,
        };
        while generation.tokens.len() < decode.max_new_tokens {
            let row = out.logits.row(out.logits.rows() - 1).to_vec();
            let next = argmax(&row) as u32;
            generation.step_logits.push(row);
            if decode.stop_token == Some(next) {
                generation.stopped = true;
                break;
            }
            generation.tokens.push(next);
            if cache.next_position() >= self.config.max_positions
                || generation.tokens.len() == decode.max_new_tokens
            {
                break;
            }
            spans.push_generated();
            out = step(&[next], &spans, &mut cache, &mut counters)?;
        }
        generation.counters = counters;
        Ok(generation)
    }

    /// Mean NLL per target token, pooled over `batch`.
    pub fn target_nll(&self, batch: &[TrainingSequence], spec: &InterventionSpec) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in batch {
            seq.validate()?;
            let rows: Vec<usize> = seq.targets.iter().map(|&p| p - 1).collect();
            let pass = Pass {
                spec,
                spans: &seq.spans,
                cache: None,
                eviction: false,
                gates: None,
                dropout: None,
                counters: None,
                trace: None,
                position_offset: 0,
                logit_rows: Some(&rows),
            };
            let (logits, _) = self.run(&mut Eager, &seq.tokens, pass)?;
            let pairs: Vec<(usize, usize)> = seq
                .targets
                .iter()
                .enumerate()
                .map(|(i, &p)| (i, seq.tokens[p] as usize))
                .collect();
            let (mean, _) = ops::cross_entropy_over_positions(&logits.into_tensor(), &pairs)?;
            total += mean.as_f64() * pairs.len() as f64;
            count += pairs.len();
        }
        if count == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        Ok(total / count as f64)
    }

    /// Records the loss of one sequence on `rec`, scaled by `weight`.
    ///
    /// The recorded value is `weight · mean NLL over the sequence's targets`.
    /// Summing these over a batch with weights `n_i / N` gives the pooled
    /// mean.
    pub fn record_loss<'w>(
        &'w self,
        rec: &mut Recorder<'w, T>,
        seq: &TrainingSequence,
        spec: &InterventionSpec,
        extras: TrainableExtras<'_>,
        position_offset: usize,
        weight: f64,
    ) -> Result<Var> {
        seq.validate()?;
        let rows: Vec<usize> = seq.targets.iter().map(|&p| p - 1).collect();
        let pass = Pass {
            spec,
            spans: &seq.spans,
            cache: None,
            eviction: false,
            gates: extras.gates,
            dropout: extras.dropout,
            counters: None,
            trace: None,
            position_offset,
            logit_rows: Some(&rows),
        };
        let (logits, _) = self.run(rec, &seq.tokens, pass)?;
        let pairs: Vec<(usize, usize)> = seq
            .targets
            .iter()
            .enumerate()
            .map(|(i, &p)| (i, seq.tokens[p] as usize))
            .collect();
        let loss = rec.tape.cross_entropy(logits, &pairs)?;
        Ok(rec.tape.scale(loss, T::from_f64(weight)))
    }

    fn run<'w, G: Graph<'w, T>>(
        &'w self,
        g: &mut G,
        tokens: &[u32],
        mut pass: Pass<'_, '_, G::V, T>,
    ) -> Result<(G::V, Vec<usize>)> {
        let cfg = &self.config;
        let w = &self.weights;
        let (d, n_heads, d_head) = (cfg.d_model, cfg.n_heads, cfg.d_head());
        if tokens.is_empty() {
            return Err(Error::Contract("forward over zero tokens".into()));
        }
        pass.spec.validate(cfg.n_layers, n_heads)?;
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let start = pass.cache.as_ref().map_or(0, |c| c.next_position());
        let end = start + tokens.len();
        if end + pass.position_offset > cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len: end + pass.position_offset,
                max: cfg.max_positions,
            });
        }
        if pass.spans.len() < end {
            return Err(Error::Contract(format!(
                "span map covers {} positions, need {end}",
                pass.spans.len()
            )));
        }
        if let Some(gates) = pass.gates {
            if gates.len() != cfg.n_layers * n_heads {
                return Err(Error::shape(
                    "forward",
                    format!("{} gate values for {} heads", gates.len(), cfg.n_layers * n_heads),
                ));
            }
        }
        if let Some(c) = pass.counters.as_deref_mut() {
            c.ensure(cfg.n_layers);
        }

        let mut positions: Vec<usize> = (start..end).collect();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos_ids: Vec<usize> = positions.iter().map(|&p| p + pass.position_offset).collect();
        let tok_table = g.param(ParamId::TokenEmbedding, &w.token_embedding);
        let pos_table = g.param(ParamId::PositionEmbedding, &w.position_embedding);
        let te = g.embedding(&tok_table, &ids)?;
        let pe = g.embedding(&pos_table, &pos_ids)?;
        let mut x = g.add(&te, &pe)?;
        // position index of the row whose logits the caller reads last
        let last_position = end - 1;
        let mut logit_rows: Option<Vec<usize>> = pass.logit_rows.map(<[usize]>::to_vec);

        let inv_sqrt = T::from_f64(1.0 / (d_head as f64).sqrt());
        for (l, lw) in w.layers.iter().enumerate() {
            let layer = l + 1;
            let pid = |p| ParamId::Layer(l, p);
            let masked_here = pass.spec.mask.is_some_and(|m| m.active_at(layer));
            let evict_here = pass.eviction && masked_here;
            if evict_here {
                let keep: Vec<usize> = positions
                    .iter()
                    .enumerate()
                    .filter(|&(_, &p)| p == last_position || !pass.spec.masks_key(layer, pass.spans.tag(p)))
                    .map(|(i, _)| i)
                    .collect();
                if keep.len() < positions.len() {
                    if logit_rows.is_some() {
                        return Err(Error::Contract("eviction with selected logit rows".into()));
                    }
                    x = g.select_rows(&x, &keep)?;
                    positions = keep.iter().map(|&i| positions[i]).collect();
                }
            }
            let rows = positions.len();
            if let Some(c) = pass.counters.as_deref_mut() {
                c.rows[l] += rows as u64;
            }

            if pass.spec.ablated_layers.contains(&layer) {
                if let Some(t) = pass.trace.as_deref_mut() {
                    t.pre_output_projection.push(None);
                }
            } else {
                let g1 = g.param(pid(LayerParam::Ln1Gain), &lw.ln1_gain);
                let b1 = g.param(pid(LayerParam::Ln1Bias), &lw.ln1_bias);
                let h = g.layernorm(&x, &g1, &b1)?;
                let wq = g.param(pid(LayerParam::Wq), &lw.wq);
                let wk = g.param(pid(LayerParam::Wk), &lw.wk);
                let wv = g.param(pid(LayerParam::Wv), &lw.wv);
                let q = g.matmul(&h, &wq)?;
                let k_new = g.matmul(&h, &wk)?;
                let v_new = g.matmul(&h, &wv)?;

                let cached = pass
                    .cache
                    .as_deref()
                    .and_then(|c| c.layer(layer))
                    .filter(|lc| !lc.is_empty());
                let (keys, vals, key_positions) = match cached {
                    Some(lc) => {
                        let ck = g.constant(lc.keys(d));
                        let cv = g.constant(lc.values(d));
                        let mut kp = lc.positions().to_vec();
                        kp.extend_from_slice(&positions);
                        let keys = g.concat_rows(&[ck, k_new.clone()])?;
                        let vals = g.concat_rows(&[cv, v_new.clone()])?;
                        (keys, vals, kp)
                    }
                    None => (k_new.clone(), v_new.clone(), positions.clone()),
                };
                let mask: Tensor<T> = build_mask(pass.spans, pass.spec, layer, &positions, &key_positions)?;
                if let Some(c) = pass.counters.as_deref_mut() {
                    c.attention_pairs[l] += (rows * key_positions.len() * n_heads) as u64;
                }

                let mut heads = Vec::with_capacity(n_heads);
                for head in 0..n_heads {
                    let qh = g.slice_cols(&q, head * d_head, d_head)?;
                    let kh = g.slice_cols(&keys, head * d_head, d_head)?;
                    let vh = g.slice_cols(&vals, head * d_head, d_head)?;
                    let scores = g.matmul_bt(&qh, &kh)?;
                    let scores = g.scale(&scores, inv_sqrt);
                    let probs = g.masked_softmax(&scores, &mask)?;
                    let mut o = g.matmul(&probs, &vh)?;
                    if let Some(gates) = pass.gates {
                        o = g.mul_scalar(&o, &gates[l * n_heads + head])?;
                    } else if let Some(row) = pass.spec.gate_row(layer) {
                        if row[head] != 1.0 {
                            o = g.scale(&o, T::from_f64(row[head]));
                        }
                    }
                    heads.push(o);
                }
                let concat = if heads.len() == 1 {
                    heads.pop().expect("one head")
                } else {
                    g.concat_cols(&heads)?
                };
                if let Some(t) = pass.trace.as_deref_mut() {
                    t.pre_output_projection.push(Some(g.value(&concat).clone()));
                }
                let wo = g.param(pid(LayerParam::Wo), &lw.wo);
                let mut attn = g.matmul(&concat, &wo)?;
                if let Some(adapter) = self.lora.get(&layer) {
                    let input = match pass.dropout.as_deref_mut() {
                        Some(rng) if adapter.dropout > 0.0 => {
                            let keep = ops::dropout_mask(&[rows, d], adapter.dropout, rng);
                            g.mul_const(&concat, keep)?
                        }
                        _ => concat.clone(),
                    };
                    let a = g.param(ParamId::LoraA(l), &adapter.a);
                    let b = g.param(ParamId::LoraB(l), &adapter.b);
                    let low = g.matmul_bt(&input, &a)?;
                    let up = g.matmul_bt(&low, &b)?;
                    let up = g.scale(&up, T::from_f64(adapter.scale()));
                    attn = g.add(&attn, &up)?;
                }
                x = g.add(&x, &attn)?;

                if let Some(c) = pass.cache.as_deref_mut() {
                    let kt = g.value(&k_new);
                    let vt = g.value(&v_new);
                    let lc = c.layer_mut(layer);
                    for (i, &p) in positions.iter().enumerate() {
                        if evict_here && pass.spec.masks_key(layer, pass.spans.tag(p)) {
                            continue;
                        }
                        lc.push(p, kt.row(i), vt.row(i));
                    }
                }
            }

            let g2 = g.param(pid(LayerParam::Ln2Gain), &lw.ln2_gain);
            let b2 = g.param(pid(LayerParam::Ln2Bias), &lw.ln2_bias);
            let h = g.layernorm(&x, &g2, &b2)?;
            let w1 = g.param(pid(LayerParam::W1), &lw.w1);
            let w2 = g.param(pid(LayerParam::W2), &lw.w2);
            let up = g.matmul(&h, &w1)?;
            let act = g.gelu(&up);
            let down = g.matmul(&act, &w2)?;
            x = g.add(&x, &down)?;
            if let Some(t) = pass.trace.as_deref_mut() {
                t.residual.push(g.value(&x).clone());
            }
        }
        if let Some(c) = pass.cache.as_deref_mut() {
            c.advance(tokens.len());
        }

        if let Some(rows) = logit_rows.take() {
            x = g.select_rows(&x, &rows)?;
            positions = rows.iter().map(|&r| positions[r]).collect();
        }
        let gf = g.param(ParamId::FinalLnGain, &w.final_ln_gain);
        let bf = g.param(ParamId::FinalLnBias, &w.final_ln_bias);
        let xf = g.layernorm(&x, &gf, &bf)?;
        let logits = match &w.unembedding {
            Some(u) => {
                let u = g.param(ParamId::Unembedding, u);
                g.matmul(&xf, &u)?
            }
            None => g.matmul_bt(&xf, &tok_table)?,
        };
        Ok((logits, positions))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
