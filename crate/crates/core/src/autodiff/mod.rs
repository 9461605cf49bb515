//! Dense float64 tensors with reverse-mode automatic differentiation,
//! sized for the models in [`crate::models`].

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{AutodiffError, Gradients, ParamId, ParamStore, Tape, Val};
pub use tensor::Tensor;
