//! Dense tensors, a reverse-mode tape, gradient checking and SGD.

mod gradcheck;
mod ops;
mod optim;
mod real;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{sgd_step, LrSchedule};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
