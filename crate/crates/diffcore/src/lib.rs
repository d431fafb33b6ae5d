//! Reverse-mode differentiation over dense arrays.
//!
//! The engine is deliberately small: a define-by-run [`Tape`] of primitives,
//! a [`ParamStore`] of named trainable arrays, bias-corrected Adam and a
//! central-difference gradient checker. Everything is single-threaded and
//! deterministic, so two runs with the same inputs produce identical bits.

mod array;
mod check;
mod error;
mod optim;
mod params;
mod tape;

pub use array::{matmul, Array, Real};
pub use check::{finite_diff_check, promote};
pub use error::{DiffError, Result};
pub use optim::{AdamConfig, AdamState, StepLr};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Axis, Inputs, Tape, Var, LAYER_NORM_EPS};
