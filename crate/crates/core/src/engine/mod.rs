//! Dense tensors and reverse-mode differentiation for small image classifiers.

pub mod conv;
pub mod gradcheck;
pub mod graph;
mod scalar;
mod tensor;

pub use conv::{conv2d_im2col, conv2d_reference, Padding};
pub use graph::{
    backward, forward, softmax_rows, BatchNormSpec, Bindings, Execution, Gradients, Graph, Mode,
    MovingStats, Node, NodeId, Op,
};
pub use scalar::Scalar;
pub use tensor::{BitPattern, NamedTensor, Tensor};
