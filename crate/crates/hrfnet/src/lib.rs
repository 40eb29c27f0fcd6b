//! HRFNet: high-resolution forgery localization with fused shallow/deep
//! RGB and noise-residual branches, plus the data synthesis, training,
//! and evaluation tooling around it.

pub mod checkpoint;
pub mod datasynth;
pub mod error;
pub mod eval;
pub mod memtrack;
pub mod model;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod parallel;
pub mod srm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
