// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with causal attention, per-layer context masks,
//! head gates and an incremental KV cache.

mod cache;
pub mod checkpoint;
mod config;
mod forward;
mod graph;
mod lora;
mod weights;

use std::path::Path;

pub use cache::{KVCache, LayerCache};
pub use checkpoint::{ArtifactKind, Container};
pub use config::{ModelConfig, Positional};
pub use forward::{
    argmax, CostCounters, DecodeOptions, ForwardOptions, ForwardOutput, ForwardTrace, Generation,
    TrainableExtras, TrainingSequence, Transformer,
};
pub use graph::{Eager, EagerValue, Graph, Recorder};
pub use lora::LoraAdapter;
pub use weights::{LayerParam, LayerWeights, ParamId, TransformerWeights};

use crate::error::{Error, Result};

impl Transformer<f32> {
    /// Base weights only; adapters are stored separately.
    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({ "config": self.config });
        let mut c = Container::new(ArtifactKind::Model, meta);
        for id in self.weights.param_ids() {
            c.push(id.to_string(), self.weights.get(id).expect("listed id").clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ArtifactKind::Model {
            return Err(Error::Format {
                offset: 16,
                detail: format!("expected a model artifact, found {:?}", c.kind),
            });
        }
        let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())?;
        config.validate()?;
        let mut weights = TransformerWeights::init(&config, &mut crate::numerics::SeedRng::new(0));
        for id in weights.param_ids() {
            *weights.get_mut(id).expect("listed id") = c.get(&id.to_string())?.clone();
        }
        Self::new(config, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
