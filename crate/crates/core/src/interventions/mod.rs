// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention interventions: masking keys from a layer onwards, ablating the
//! attention sublayer of whole layers, and scaling individual heads.
//!
//! Every token carries a [`SpanRole`] and the [`Segment`] it belongs to. A
//! [`MaskVariant`] selects which segments form the masked set `u`; from
//! `from_layer` onwards (1-based, inclusive) no query may attend a key in `u`.
//! A query always keeps its own position, so a row can never be emptied by an
//! intervention; causal masking is applied to everything.

mod spans;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub use spans::{RoleRun, Segment, SpanMap, SpanRole, TokenTag};

/// Which part of the prompt a context mask removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskVariant {
    /// No instruction in the prompt; examples masked.
    ExMask,
    /// Instruction present and visible; examples masked.
    InstrExMask,
    /// Instruction and examples both masked.
    InstrAndExMask,
    /// Every non-generated token masked.
    InputMask,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 4] = [
        MaskVariant::ExMask,
        MaskVariant::InstrExMask,
        MaskVariant::InstrAndExMask,
        MaskVariant::InputMask,
    ];

    /// Whether a token belongs to this variant's masked set `u`.
    pub fn covers(self, tag: TokenTag) -> bool {
        match (self, tag.segment) {
            (_, Segment::Generated) => false,
            (MaskVariant::InputMask, _) => true,
            (_, Segment::Example(_)) => true,
            (MaskVariant::InstrAndExMask, Segment::Instruction) => true,
            _ => false,
        }
    }

    /// Whether prompts evaluated under this variant carry an instruction.
    pub fn uses_instruction(self) -> bool {
        !matches!(self, MaskVariant::ExMask)
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::ExMask => "ExMask",
            MaskVariant::InstrExMask => "InstrExMask",
            MaskVariant::InstrAndExMask => "InstrAndExMask",
            MaskVariant::InputMask => "InputMask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A context mask active at `from_layer` and every layer above it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub variant: MaskVariant,
    pub from_layer: usize,
}

impl LayerMask {
    pub fn active_at(&self, layer: usize) -> bool {
        layer >= self.from_layer
    }
}

/// Declarative description of every attention modification for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    #[serde(default)]
    pub mask: Option<LayerMask>,
    #[serde(default)]
    pub ablated_layers: BTreeSet<usize>,
    /// `[n_layers][n_heads]` multipliers in `[0, 1]`.
    #[serde(default)]
    pub gates: Option<Vec<Vec<f64>>>,
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn context_mask(variant: MaskVariant, from_layer: usize) -> Self {
        Self {
            mask: Some(LayerMask {
                variant,
                from_layer,
            }),
            ..Self::default()
        }
    }

    pub fn ablate(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            ablated_layers: layers.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn with_gates(mut self, gates: Vec<Vec<f64>>) -> Self {
        self.gates = Some(gates);
        self
    }

    pub fn validate(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        if let Some(m) = &self.mask {
            if m.from_layer < 1 || m.from_layer > n_layers + 1 {
                return Err(Error::Contract(format!(
                    "from_layer {} outside 1..={}",
                    m.from_layer,
                    n_layers + 1
                )));
            }
        }
        if let Some(&bad) = self
            .ablated_layers
            .iter()
            .find(|&&l| l < 1 || l > n_layers)
        {
            return Err(Error::LayerOutOfRange {
                layer: bad,
                n_layers,
            });
        }
        if let Some(g) = &self.gates {
            if g.len() != n_layers || g.iter().any(|row| row.len() != n_heads) {
                return Err(Error::shape(
                    "gates",
                    format!("expected {n_layers}x{n_heads} gate matrix"),
                ));
            }
            if g.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Contract("gate entries must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Masked set membership of a key at `layer`.
    pub fn masks_key(&self, layer: usize, tag: TokenTag) -> bool {
        self.mask
            .is_some_and(|m| m.active_at(layer) && m.variant.covers(tag))
    }

    pub fn gate_row(&self, layer: usize) -> Option<&[f64]> {
        self.gates
            .as_ref()
            .and_then(|g| g.get(layer - 1))
            .map(Vec::as_slice)
    }
}

/// Whether the attention sublayer of `layer` (1-based) is switched off.
pub fn ablate_layer(spec: &InterventionSpec, layer: usize) -> bool {
    spec.ablated_layers.contains(&layer)
}

/// Additive mask for one layer: `[queries × keys]` of `0` or
/// [`Scalar::MASKED`].
///
/// Positions are absolute token indices into `spans`.
pub fn build_mask<T: Scalar>(
    spans: &SpanMap,
    spec: &InterventionSpec,
    layer: usize,
    query_positions: &[usize],
    key_positions: &[usize],
) -> Result<Tensor<T>> {
    if let Some(&p) = query_positions
        .iter()
        .chain(key_positions)
        .find(|&&p| p >= spans.len())
    {
        return Err(Error::shape(
            "build_mask",
            format!("position {p} outside span map of {}", spans.len()),
        ));
    }
    let key_masked: Vec<bool> = key_positions
        .iter()
        .map(|&k| spec.masks_key(layer, spans.tag(k)))
        .collect();
    let mut data = Vec::with_capacity(query_positions.len() * key_positions.len());
    for &q in query_positions {
        for (&k, &masked) in key_positions.iter().zip(&key_masked) {
            let drop = k > q || (masked && k != q);
            data.push(if drop { T::MASKED } else { T::zero() });
        }
    }
    Tensor::new(vec![query_positions.len(), key_positions.len()], data)
}

/// Scales each head's slice of `head_outputs: [n_heads × positions × d_head]`
/// by its gate.
pub fn gate_heads<T: Scalar>(head_outputs: &Tensor<T>, gate_row: &[f64]) -> Result<Tensor<T>> {
    let n_heads = *head_outputs.shape().first().unwrap_or(&0);
    if head_outputs.shape().len() != 3 || gate_row.len() != n_heads {
        return Err(Error::shape(
            "gate_heads",
            format!(
                "outputs {:?} with {} gates",
                head_outputs.shape(),
                gate_row.len()
            ),
        ));
    }
    let per_head = head_outputs.len() / n_heads.max(1);
    let mut out = head_outputs.clone();
    for (chunk, &g) in out.data_mut().chunks_mut(per_head.max(1)).zip(gate_row) {
        let g = T::from_f64(g);
        for v in chunk {
            *v = *v * g;
        }
    }
    Ok(out)
}
