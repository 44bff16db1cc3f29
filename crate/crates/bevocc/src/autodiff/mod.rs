//! Dense-tensor arithmetic with reverse-mode differentiation.
//!
//! The design is define-by-run: a [`Tape`] records every primitive as it
//! executes, [`Tape::backward`] replays the record in reverse and accumulates
//! gradients into the [`Param`] leaves that requested them. Tensors are plain
//! row-major `f64` buffers; 64-bit precision is used everywhere so that
//! central finite differences are a trustworthy oracle for every kernel.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_subset};
pub use tape::{BorderMode, Tape, Val};
pub use tensor::{Param, Tensor};
