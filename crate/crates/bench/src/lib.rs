// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures for the inference benchmarks.

use icl_locus::interventions::SpanMap;
use icl_locus::model::DecodeOptions;
use icl_locus::numerics::SeedRng;
use icl_locus::prompting::{Corpus, CorpusConfig};
use icl_locus::{InterventionSpec, MaskVariant, ModelConfig, Result, Transformer};

/// A desk-sized model with random weights and one formatted test prompt.
///
/// Weights do not change attention cost, so an untrained model times the
/// same work a trained one would.
pub struct Fixture {
    pub model: Transformer,
    pub tokens: Vec<u32>,
    pub spans: SpanMap,
}

impl Fixture {
    pub fn desk(k: usize, instruction: bool) -> Result<Self> {
        let corpus = Corpus::generate(&CorpusConfig::default(), 1)?;
        let config = ModelConfig::desk(corpus.vocab().len());
        let model = Transformer::init(config, &mut SeedRng::new(1).derive_label("init"))?;
        let episode = corpus
            .test_episodes(k, instruction, Some(1), 1)?
            .into_iter()
            .next()
            .expect("one test episode");
        let (tokens, spans) = episode.format(corpus.vocab(), model.config.max_positions)?;
        Ok(Self { model, tokens, spans })
    }

    pub fn n_layers(&self) -> usize {
        self.model.config.n_layers
    }

    /// Greedy decode of a fixed number of tokens, masking context from
    /// `from_layer` upward; `from_layer = n + 1` is the unmasked baseline.
    pub fn decode(&self, variant: MaskVariant, from_layer: usize, eviction: bool, new_tokens: usize) -> Result<Vec<u32>> {
        let spec = if from_layer > self.n_layers() {
            InterventionSpec::none()
        } else {
            InterventionSpec::context_mask(variant, from_layer)
        };
        let opts = DecodeOptions {
            max_new_tokens: new_tokens,
            stop_token: None,
            eviction,
        };
        Ok(self.model.generate(&self.tokens, &self.spans, &spec, &opts)?.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evicted_decode_matches_masked_decode() {
        let f = Fixture::desk(5, true).unwrap();
        for r in 1..=f.n_layers() {
            let masked = f.decode(MaskVariant::InstrAndExMask, r, false, 4).unwrap();
            let evicted = f.decode(MaskVariant::InstrAndExMask, r, true, 4).unwrap();
            assert_eq!(masked, evicted, "from layer {r}");
        }
    }
}
