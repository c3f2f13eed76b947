//! Tape-based reverse-mode differentiation for small 3D vision models.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; [`Graph::backward`]
//! then walks the tape once in reverse. Everything is `f64`, which keeps
//! finite-difference verification meaningful at tight tolerances.

mod graph;
pub mod gradcheck;
mod ops;
mod tensor;

pub use graph::{BackwardArgs, Gradients, Graph, Var};
pub use ops::conv::ConvGeometry;
pub use ops::elementwise::sigmoid;
pub use ops::spatial::{block_mean_taps, linear_taps, AxisTaps};
pub use ops::stats::symmetric_eigen;
pub use tensor::Tensor;
