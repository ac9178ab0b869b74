//! Dense rank-2 tensors, a reverse-mode tape, and a finite-difference oracle.

pub mod check;
mod fd;
mod params;
mod tape;
mod tensor;

pub use fd::{central_difference, central_difference_smooth, finite_difference_gradient, gradients_agree};
pub use params::{Block, Gradients, Param, ParamId, ParamStore};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
