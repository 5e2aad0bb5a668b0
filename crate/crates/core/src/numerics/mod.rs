//! Dense tensors, reverse-mode autodiff and finite-difference checking.

pub mod grad_check;
pub mod params;
pub mod tape;
pub mod tensor;

pub use grad_check::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{Bound, Init, ParamStore};
pub use tape::{Gradients, Graph, Var};
pub use tensor::{layer_norm, matmul, permute, softmax, Real, Tensor};
