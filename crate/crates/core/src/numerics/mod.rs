//! Dense `f64` arrays, reverse-mode differentiation, and a finite-difference
//! gradient oracle.

mod array;
pub mod gradcheck;
pub mod rng;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, finite_diff_report, GradCheckReport};
pub use rng::SeedStream;
pub use tape::{AttnSpec, Gradients, Tape, Var};
