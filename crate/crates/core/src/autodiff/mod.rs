//! Dense `f64` tensors, a reverse-mode gradient tape and the ADAM optimizer.

mod adam;
pub mod checkpoint;
pub(crate) mod gemm;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{softmax_in_place, ConvGeometry, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
