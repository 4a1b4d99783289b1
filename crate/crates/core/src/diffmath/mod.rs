//! Dense `f64` tensors with a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, check_gradients, compare_gradients, numeric_gradients, refined_numeric_gradients,
    GradCheckReport, RefinedGradients, DEFAULT_STEP, DEFAULT_TOLERANCE, MIN_STEP,
};
pub(crate) use tape::softmax_into;
pub use tape::{Elementwise, Segment, Tape, Var};
pub use tensor::Tensor;
