//! Tensors, reverse-mode differentiation, optimizers and random streams.

mod gradcheck;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with, relative_error, GradcheckReport, LeafCheck};
pub use optim::Adam;
pub use rng::Rng;
pub use tape::{Axis, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

pub mod fd {
    //! Finite-difference settings shared with callers that run their own checks.
    pub use super::gradcheck::{FLOOR, STEP, TOLERANCE};
}
