//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse, accumulating
//! gradients in a fixed order so results are reproducible bit for bit.
//!
//! The operator set is closed: convolution, transposed convolution, PReLU,
//! add/sub, scalar multiply, channel concat, sum/mean, abs, square, channel
//! scaling and channel unit-normalization.

mod conv;
mod graph;
mod gradcheck;
mod scalar;
mod tensor;

pub use conv::{conv2d_forward, conv_transpose2d_forward, ConvGeometry};
pub use graph::{Gradients, Graph, GraphError, NodeId};
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor, TensorError};
