//! Minimal dense tensors with tape-based reverse-mode differentiation.

mod array;
pub mod gradcheck;
pub mod layers;
mod params;
mod tape;

pub use array::Tensor;
pub use params::{Init, ParamStore};
pub use tape::{Gradients, LossFn, Tape, Var, LAYER_NORM_EPS};
