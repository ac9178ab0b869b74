//! Synthetic category-level 9DoF pose estimation with cross-category
//! gradient contention diagnostics and difficulty-routed branches.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod grouping;
pub mod losses;
pub mod numgrad;
pub mod posenet;
pub mod scalar;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the trainer and diagnostics.
pub type Tensor = numgrad::Tensor<f64>;
pub type Tape = numgrad::Tape<f64>;
pub type ParamStore = numgrad::ParamStore<f64>;
pub type Gradients = numgrad::Gradients<f64>;
pub type PoseNet = posenet::PoseNet<f64>;
