//! A small define-by-run reverse-mode autodiff engine over `f32` tensors.
//!
//! Only the operations the denoiser, the perceptual feature pyramid and the
//! loss terms need are provided. Convolutions run through im2col and a
//! blocked SGEMM.

mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
