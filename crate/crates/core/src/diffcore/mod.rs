// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors and a reverse-mode autodiff tape.
//!
//! Values are computed eagerly as operations are recorded; `f32` is used for
//! training and `f64` for gradient verification.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_many, rel_err, GradCheck, REL_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Float, Tensor};
