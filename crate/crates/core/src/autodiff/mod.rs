//! Dense-matrix reverse-mode differentiation, parameter storage, the
//! adaptive-moment optimizer and a finite-difference gradient checker.
//!
//! All arithmetic is `f64`.

mod check;
mod matrix;
mod params;
mod tape;

pub use check::{finite_difference_check, GradCheckConfig, GradCheckReport};
pub use matrix::Matrix;
pub use params::{OptimizerConfig, ParamId, ParameterStore};
pub use tape::{GradientRules, Tape, Var};
