//! Tensors, reverse-mode differentiation, and the momentum SGD optimizer.

mod gemm;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub(crate) use gemm::{gemm, View};
pub use sgd::{sgd_step, Param, TrainingSchedule, Velocities};
pub use tape::{AttrValue, Attrs, Gradients, Op, OpKind, Tape, Var};
pub use tensor::Tensor;
