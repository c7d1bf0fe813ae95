// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors, eager kernels, a reverse-mode tape and the Adam optimizer.

mod adam;
pub mod ops;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use rng::SeedRng;
pub use scalar::{is_masked, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{concat_cols, concat_rows, select_rows};
pub use tape::sigmoid;
