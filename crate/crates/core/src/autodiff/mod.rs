//! Minimal reverse-mode automatic differentiation.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{sigmoid, Pointwise, Tape, Var};
