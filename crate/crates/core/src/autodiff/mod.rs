//! Reverse-mode automatic differentiation and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{Bound, NamedTensor, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
