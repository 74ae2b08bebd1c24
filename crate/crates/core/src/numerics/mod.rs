//! Numeric substrate: tensors, reverse-mode AD, init, Adam, checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, StepDecay};
pub use params::{init_params, InitScheme, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, TensorId};
pub use tensor::{Shape, Tensor};
