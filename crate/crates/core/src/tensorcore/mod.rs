//! Dense tensors, reverse-mode gradients and the SGD variant used for
//! every optimization in the crate.

pub mod ops;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use ops::conv2d;
pub use sgd::{sgd_step, ParamClass, ParamGroup, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
