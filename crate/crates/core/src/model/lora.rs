// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeedRng, Tensor};

/// Low-rank update to one layer's attention output projection:
/// `ΔW = (alpha / rank) · B · A`, applied to the concatenated head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T = f32> {
    /// `[rank × d_model]`
    pub a: Tensor<T>,
    /// `[d_model × rank]`
    pub b: Tensor<T>,
    pub alpha: f64,
    pub dropout: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A` Gaussian with std `1/sqrt(d_model)`, `B` zero, so a fresh adapter
    /// leaves the model unchanged.
    pub fn init(d_model: usize, rank: usize, alpha: f64, dropout: f64, rng: &mut SeedRng) -> Result<Self> {
        if rank == 0 || d_model == 0 {
            return Err(Error::Config("LoRA rank and width must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("LoRA dropout {dropout} outside [0, 1)")));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let a = (0..rank * d_model)
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Ok(Self {
            a: Tensor::new(vec![rank, d_model], a)?,
            b: Tensor::zeros(&[d_model, rank]),
            alpha,
            dropout,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// The dense update `(alpha / rank) · B · A`, `[d_model × d_model]`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        let ba = crate::numerics::ops::matmul(&self.b, &self.a)?;
        let s = T::from_f64(self.scale());
        Ok(ba.map(|v| v * s))
    }
}
