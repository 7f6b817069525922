//! Differentiable primitives used inside a training block. Each forward op
//! has a hand-written backward pass; there is no general autodiff graph.

mod activation;
mod conv;
mod norm;

pub use activation::{relu, relu_backward};
pub use conv::{conv2d, conv2d_backward, conv2d_backward_cached, conv2d_with_raw, ConvGrads, ConvParams};
pub use norm::{
    normalize, normalize_backward, normalize_backward_cached, normalize_forward, NormForward, NormGrads, NormMode,
    NormParams,
};
