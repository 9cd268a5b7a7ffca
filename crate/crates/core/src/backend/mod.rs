//! Dense tensors, a reverse-mode tape, and finite-difference gradient checks.

mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tape::nll_value;
