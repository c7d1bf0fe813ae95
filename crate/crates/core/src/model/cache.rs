// SPDX-License-Identifier: MIT OR Apache-2.0

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::interventions::{MaskVariant, SpanMap};
use crate::numerics::{Scalar, Tensor};

/// Keys and values kept for one layer, with the absolute position of each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerCache<T = f32> {
    keys: Vec<T>,
    values: Vec<T>,
    positions: Vec<usize>,
}

impl<T: Scalar> LayerCache<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self, d_model: usize) -> Tensor<T> {
        Tensor::new(vec![self.len(), d_model], self.keys.clone()).expect("rows of width d_model")
    }

    pub fn values(&self, d_model: usize) -> Tensor<T> {
        Tensor::new(vec![self.len(), d_model], self.values.clone()).expect("rows of width d_model")
    }

    pub(crate) fn push(&mut self, position: usize, key: &[T], value: &[T]) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(position);
    }

    fn retain(&mut self, d_model: usize, keep: impl Fn(usize) -> bool) {
        let mut keys = Vec::with_capacity(self.keys.len());
        let mut values = Vec::with_capacity(self.values.len());
        let mut positions = Vec::with_capacity(self.positions.len());
        for (i, &p) in self.positions.iter().enumerate() {
            if keep(p) {
                keys.extend_from_slice(&self.keys[i * d_model..(i + 1) * d_model]);
                values.extend_from_slice(&self.values[i * d_model..(i + 1) * d_model]);
                positions.push(p);
            }
        }
        self.keys = keys;
        self.values = values;
        self.positions = positions;
    }
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache<T = f32> {
    layers: Vec<LayerCache<T>>,
    d_model: usize,
    next_position: usize,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: vec![LayerCache::default(); config.n_layers],
            d_model: config.d_model,
            next_position: 0,
        }
    }

    /// Absolute position the next token will occupy.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.next_position += n;
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Layer by 1-based index.
    pub fn layer(&self, layer: usize) -> Option<&LayerCache<T>> {
        layer.checked_sub(1).and_then(|l| self.layers.get(l))
    }

    pub(crate) fn layer_mut(&mut self, layer: usize) -> &mut LayerCache<T> {
        &mut self.layers[layer - 1]
    }

    /// Stored entry count per layer.
    pub fn entry_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerCache::len).sum()
    }

    /// Drops the entries of every position `variant` covers from layers
    /// `from_layer..=n`.
    pub fn evict(&mut self, from_layer: usize, spans: &SpanMap, variant: MaskVariant) -> Result<()> {
        if from_layer == 0 {
            return Err(Error::LayerOutOfRange {
                layer: 0,
                n_layers: self.layers.len(),
            });
        }
        let d = self.d_model;
        for layer in from_layer..=self.layers.len() {
            self.layers[layer - 1].retain(d, |p| p >= spans.len() || !variant.covers(spans.tag(p)));
        }
        Ok(())
    }
}
