// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locating where in-context task recognition happens inside a small
//! translation transformer, by masking context from a chosen layer upward.

pub mod efficiency;
pub mod error;
pub mod eval;
pub mod harness;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod prompting;
pub mod sweeps;
pub mod training;

pub use error::{Error, Result};
pub use interventions::{InterventionSpec, LayerMask, MaskVariant, SpanMap, SpanRole, TokenTag};
pub use model::{KVCache, ModelConfig, Transformer};
pub use numerics::{SeedRng, Tensor};
