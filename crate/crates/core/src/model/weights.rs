// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeedRng, Tensor};

/// Per-layer parameter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerParam {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Gain,
    Ln2Bias,
    W1,
    W2,
}

impl LayerParam {
    pub const ALL: [LayerParam; 10] = [
        LayerParam::Ln1Gain,
        LayerParam::Ln1Bias,
        LayerParam::Wq,
        LayerParam::Wk,
        LayerParam::Wv,
        LayerParam::Wo,
        LayerParam::Ln2Gain,
        LayerParam::Ln2Bias,
        LayerParam::W1,
        LayerParam::W2,
    ];

    fn name(self) -> &'static str {
        match self {
            LayerParam::Ln1Gain => "ln1.gain",
            LayerParam::Ln1Bias => "ln1.bias",
            LayerParam::Wq => "wq",
            LayerParam::Wk => "wk",
            LayerParam::Wv => "wv",
            LayerParam::Wo => "wo",
            LayerParam::Ln2Gain => "ln2.gain",
            LayerParam::Ln2Bias => "ln2.bias",
            LayerParam::W1 => "mlp.w1",
            LayerParam::W2 => "mlp.w2",
        }
    }
}

/// Identity of every trainable tensor. Layer indices are 0-based here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    TokenEmbedding,
    PositionEmbedding,
    Unembedding,
    FinalLnGain,
    FinalLnBias,
    Layer(usize, LayerParam),
    LoraA(usize),
    LoraB(usize),
    GateLogAlpha,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::TokenEmbedding => f.write_str("tok_emb"),
            ParamId::PositionEmbedding => f.write_str("pos_emb"),
            ParamId::Unembedding => f.write_str("unembed"),
            ParamId::FinalLnGain => f.write_str("ln_f.gain"),
            ParamId::FinalLnBias => f.write_str("ln_f.bias"),
            ParamId::Layer(l, p) => write!(f, "layers.{l}.{}", p.name()),
            ParamId::LoraA(l) => write!(f, "lora.{l}.a"),
            ParamId::LoraB(l) => write!(f, "lora.{l}.b"),
            ParamId::GateLogAlpha => f.write_str("gates.log_alpha"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// `[d_model × d_model]`, applied as `x · W`.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    /// `[d_model × d_ff]`
    pub w1: Tensor<T>,
    /// `[d_ff × d_model]`
    pub w2: Tensor<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn get(&self, p: LayerParam) -> &Tensor<T> {
        match p {
            LayerParam::Ln1Gain => &self.ln1_gain,
            LayerParam::Ln1Bias => &self.ln1_bias,
            LayerParam::Wq => &self.wq,
            LayerParam::Wk => &self.wk,
            LayerParam::Wv => &self.wv,
            LayerParam::Wo => &self.wo,
            LayerParam::Ln2Gain => &self.ln2_gain,
            LayerParam::Ln2Bias => &self.ln2_bias,
            LayerParam::W1 => &self.w1,
            LayerParam::W2 => &self.w2,
        }
    }

    pub fn get_mut(&mut self, p: LayerParam) -> &mut Tensor<T> {
        match p {
            LayerParam::Ln1Gain => &mut self.ln1_gain,
            LayerParam::Ln1Bias => &mut self.ln1_bias,
            LayerParam::Wq => &mut self.wq,
            LayerParam::Wk => &mut self.wk,
            LayerParam::Wv => &mut self.wv,
            LayerParam::Wo => &mut self.wo,
            LayerParam::Ln2Gain => &mut self.ln2_gain,
            LayerParam::Ln2Bias => &mut self.ln2_bias,
            LayerParam::W1 => &mut self.w1,
            LayerParam::W2 => &mut self.w2,
        }
    }
}

/// All base-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights<T = f32> {
    /// `[vocab × d_model]`
    pub token_embedding: Tensor<T>,
    /// `[max_positions × d_model]`
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_ln_gain: Tensor<T>,
    pub final_ln_bias: Tensor<T>,
    /// `[d_model × vocab]`; absent when embeddings are tied.
    pub unembedding: Option<Tensor<T>>,
}

fn gaussian<T: Scalar>(shape: &[usize], std: f64, rng: &mut SeedRng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Weight and embedding scale at init.
///
/// Larger than the usual 0.02: at desk width the small init leaves
/// attention near-uniform for a long, seed-dependent stretch before the
/// model starts using the query tokens; 0.1 gets every seed past that
/// within a few hundred steps.
pub const INIT_STD: f64 = 0.1;

impl<T: Scalar> TransformerWeights<T> {
    /// Gaussian initialization at [`INIT_STD`], residual projections scaled
    /// down by `sqrt(2 · n_layers)`.
    pub fn init(config: &ModelConfig, rng: &mut SeedRng) -> Self {
        let d = config.d_model;
        let std = INIT_STD;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|l| {
                let mut r = rng.derive(l as u64 + 1);
                LayerWeights {
                    ln1_gain: Tensor::full(&[d], T::one()),
                    ln1_bias: Tensor::zeros(&[d]),
                    wq: gaussian(&[d, d], std, &mut r),
                    wk: gaussian(&[d, d], std, &mut r),
                    wv: gaussian(&[d, d], std, &mut r),
                    wo: gaussian(&[d, d], resid_std, &mut r),
                    ln2_gain: Tensor::full(&[d], T::one()),
                    ln2_bias: Tensor::zeros(&[d]),
                    w1: gaussian(&[d, config.d_ff], std, &mut r),
                    w2: gaussian(&[config.d_ff, d], resid_std, &mut r),
                }
            })
            .collect();
        let mut r = rng.derive(0);
        let token_embedding = gaussian(&[config.vocab_size, d], std, &mut r);
        let position_embedding = gaussian(&[config.max_positions, d], std, &mut r);
        let unembedding = (!config.tie_embeddings)
            .then(|| gaussian(&[d, config.vocab_size], std, &mut r));
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: Tensor::full(&[d], T::one()),
            final_ln_bias: Tensor::zeros(&[d]),
            unembedding,
        }
    }

    /// Every parameter id present, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::TokenEmbedding, ParamId::PositionEmbedding];
        for l in 0..self.layers.len() {
            ids.extend(LayerParam::ALL.iter().map(|&p| ParamId::Layer(l, p)));
        }
        ids.push(ParamId::FinalLnGain);
        ids.push(ParamId::FinalLnBias);
        if self.unembedding.is_some() {
            ids.push(ParamId::Unembedding);
        }
        ids
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        match id {
            ParamId::TokenEmbedding => Some(&self.token_embedding),
            ParamId::PositionEmbedding => Some(&self.position_embedding),
            ParamId::Unembedding => self.unembedding.as_ref(),
            ParamId::FinalLnGain => Some(&self.final_ln_gain),
            ParamId::FinalLnBias => Some(&self.final_ln_bias),
            ParamId::Layer(l, p) => self.layers.get(l).map(|w| w.get(p)),
            _ => None,
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        match id {
            ParamId::TokenEmbedding => Some(&mut self.token_embedding),
            ParamId::PositionEmbedding => Some(&mut self.position_embedding),
            ParamId::Unembedding => self.unembedding.as_mut(),
            ParamId::FinalLnGain => Some(&mut self.final_ln_gain),
            ParamId::FinalLnBias => Some(&mut self.final_ln_bias),
            ParamId::Layer(l, p) => self.layers.get_mut(l).map(|w| w.get_mut(p)),
            _ => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> TransformerWeights<U> {
        TransformerWeights {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|w| LayerWeights {
                    ln1_gain: w.ln1_gain.cast(),
                    ln1_bias: w.ln1_bias.cast(),
                    wq: w.wq.cast(),
                    wk: w.wk.cast(),
                    wv: w.wv.cast(),
                    wo: w.wo.cast(),
                    ln2_gain: w.ln2_gain.cast(),
                    ln2_bias: w.ln2_bias.cast(),
                    w1: w.w1.cast(),
                    w2: w.w2.cast(),
                })
                .collect(),
            final_ln_gain: self.final_ln_gain.cast(),
            final_ln_bias: self.final_ln_bias.cast(),
            unembedding: self.unembedding.as_ref().map(Tensor::cast),
        }
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let expect = |name: String, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape(
                    "weights",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(Error::Contract(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        if self.layers.len() != config.n_layers {
            return Err(Error::shape(
                "weights",
                format!("{} layers for n_layers {}", self.layers.len(), config.n_layers),
            ));
        }
        if config.tie_embeddings != self.unembedding.is_none() {
            return Err(Error::Config("tie_embeddings disagrees with weights".into()));
        }
        for id in self.param_ids() {
            let shape: Vec<usize> = match id {
                ParamId::TokenEmbedding => vec![config.vocab_size, d],
                ParamId::PositionEmbedding => vec![config.max_positions, d],
                ParamId::Unembedding => vec![d, config.vocab_size],
                ParamId::Layer(_, LayerParam::W1) => vec![d, config.d_ff],
                ParamId::Layer(_, LayerParam::W2) => vec![config.d_ff, d],
                ParamId::Layer(_, LayerParam::Wq | LayerParam::Wk | LayerParam::Wv | LayerParam::Wo) => {
                    vec![d, d]
                }
                _ => vec![d],
            };
            expect(id.to_string(), self.get(id).expect("listed id exists"), &shape)?;
        }
        Ok(())
    }
}
