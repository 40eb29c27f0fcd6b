//! Numeric kernels shared by the autodiff graph and the preprocessing code.
//!
//! Each kernel comes as a forward/backward pair operating on plain slices
//! or [`crate::tensor::Tensor`]s. Parallelism is routed through
//! [`crate::parallel`]; every kernel produces bitwise identical results on
//! the parallel and sequential paths.

pub(crate) mod act;
pub(crate) mod bn;
pub(crate) mod conv;
pub(crate) mod loss;
pub(crate) mod pad;
pub(crate) mod pool;
pub(crate) mod resize;
