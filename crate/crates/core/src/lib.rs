//! Conditionally adaptive multi-task learning at desk scale.

pub mod analysis;
pub mod conditioning;
pub mod data;
pub mod harness;
pub mod init;
pub mod model;
pub mod params;
pub mod sampler;
pub mod tensor;

pub use params::{ParamId, ParamStore};
pub use tensor::{Gradients, Tape, Tensor, TensorError, Var};
