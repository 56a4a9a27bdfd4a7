//! Dense arrays, reverse-mode differentiation, Adam and checkpoints.

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use params::{Grad, Param, ParamGrads, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var, BCE_EPS};
pub use tensor::{dot, sigmoid, Tensor};
