// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interventions::MaskVariant;
use crate::model::{ModelConfig, Positional};
use crate::prompting::CorpusConfig;
use crate::sweeps::{Metric, PhaseOptions, SweepOptions, LAYER_MASK_REGIMES};
use crate::training::{GateConfig, LoraConfig, PretrainConfig};

/// Model extents; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub positional: Positional,
    pub tie_embeddings: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_ff: d.d_ff,
            max_positions: d.max_positions,
            positional: d.positional,
            tie_embeddings: d.tie_embeddings,
        }
    }
}

impl ModelShape {
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_positions: self.max_positions,
            positional: self.positional,
            tie_embeddings: self.tie_embeddings,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Prompt regime for single-point commands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptRegime {
    pub k: usize,
    pub instruction: bool,
    pub variant: MaskVariant,
    /// First masked layer; `None` leaves the context visible.
    pub from_layer: Option<usize>,
}

impl Default for PromptRegime {
    fn default() -> Self {
        Self {
            k: 5,
            instruction: true,
            variant: MaskVariant::InstrAndExMask,
            from_layer: None,
        }
    }
}

/// Axes and curve-summary settings of the sweep commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub variants: Vec<MaskVariant>,
    pub ks: Vec<usize>,
    /// `(k, instruction)` regimes of the layer-ablation sweep.
    pub layer_regimes: Vec<(usize, bool)>,
    pub metric: Metric,
    /// Plateau tolerance; `None` uses the metric's default.
    pub epsilon: Option<f64>,
    pub phases: PhaseOptions,
    /// Test items per point; `None` uses the whole test pool.
    pub n_test: Option<usize>,
    pub max_new_tokens: usize,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            variants: vec![MaskVariant::ExMask, MaskVariant::InstrExMask, MaskVariant::InstrAndExMask],
            ks: vec![1, 3, 5],
            layer_regimes: LAYER_MASK_REGIMES.to_vec(),
            metric: Metric::Bleu,
            epsilon: None,
            phases: PhaseOptions::default(),
            n_test: None,
            max_new_tokens: SweepOptions::default().max_new_tokens,
        }
    }
}

impl SweepAxes {
    pub fn options(&self) -> SweepOptions {
        SweepOptions {
            n_test: self.n_test,
            max_new_tokens: self.max_new_tokens,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| self.metric.default_epsilon())
    }
}

/// Everything one CLI invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelShape,
    pub corpus: CorpusConfig,
    /// Seeds the corpus and the test episodes; shared across training seeds.
    pub corpus_seed: u64,
    pub prompt: PromptRegime,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    pub gates: GateConfig,
    pub sweep: SweepAxes,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Model to load instead of pretraining in-process.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelShape::default(),
            corpus: CorpusConfig::default(),
            corpus_seed: 1,
            prompt: PromptRegime::default(),
            pretrain: PretrainConfig::default(),
            lora: LoraConfig::default(),
            gates: GateConfig::default(),
            sweep: SweepAxes::default(),
            seed: 1,
            out: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolve(1)?;
        self.pretrain.validate()?;
        if let Some(from) = self.prompt.from_layer {
            if from < 1 || from > self.model.n_layers + 1 {
                return Err(Error::Config(format!(
                    "from_layer {from} outside 1..={}",
                    self.model.n_layers + 1
                )));
            }
        }
        if self.sweep.variants.is_empty() {
            return Err(Error::Config("sweep.variants is empty".into()));
        }
        if self.sweep.ks.is_empty() {
            return Err(Error::Config("sweep.ks is empty".into()));
        }
        if !(self.sweep.epsilon() >= 0.0) {
            return Err(Error::Config("sweep.epsilon must be non-negative".into()));
        }
        if !(self.gates.lambda >= 0.0) {
            return Err(Error::Config("gates.lambda must be non-negative".into()));
        }
        Ok(())
    }

    /// Canonical serialized form written as `config.json`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}
