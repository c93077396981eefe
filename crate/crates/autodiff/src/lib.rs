//! Small dense-tensor library with reverse-mode automatic differentiation.
//!
//! Values are `f64` matrices recorded on a [`Tape`]; [`Tape::backward`] sweeps
//! the recording once in reverse. [`Adam`] updates a named [`ParamSet`].

mod error;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_coords, relative_error, GradCheckReport};
pub use optim::Adam;
pub use params::{BoundParams, GradSet, ParamSet};
pub use tape::{sigmoid, Gradients, SparseRows, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

/// Epsilon used inside the square root of layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
