//! Differentiable network layers built on the gradient tape.

mod attention;
pub mod functional;
pub mod init;
mod layers;
mod rnn;

pub use attention::{mhsa_attention, HeadParams, MhsaModule, MhsaOutput, MhsaSpec};
pub use functional::{conv2d, instance_norm, layer_norm, leaky_relu, linear, softmax, LEAKY_SLOPE};
pub use layers::{Affine, Conv2d, Conv2dSpec, Linear};
pub use rnn::{BiRnn, BiRnnSpec, CellKind, DirectionParams};
