//! Dense tensors and a reverse-mode differentiation graph covering exactly
//! the operations the recurrent predictor needs: same-size 2-D convolution,
//! elementwise arithmetic and activations, channel concat/slice, and
//! mean/sum reductions.

mod array;
mod conv;
mod gradcheck;
mod graph;
mod scalar;

pub use array::{depth_to_space, space_to_depth, Tensor};
pub use gradcheck::{check_f32_gradient, finite_diff_check, ScalarFunction};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
