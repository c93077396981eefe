//! Driver behavior modeling on interaction graphs with counterfactual risk
//! object identification.

pub mod causal;
pub mod error;
pub mod eval;
pub mod features;
pub mod graphs;
pub mod model;
pub mod scene;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
