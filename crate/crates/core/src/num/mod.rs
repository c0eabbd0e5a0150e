//! Dense numeric core: tensors, reverse-mode differentiation, Adam and
//! finite-difference gradient checking. All learned computation in the crate
//! runs through [`Tape`].

mod gradcheck;
pub mod math;
mod optim;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::Adam;
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
