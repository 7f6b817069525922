//! Layer-local (forward-forward style) training of convolutional spiking
//! networks.
//!
//! Each training block owns a goodness head that partitions its output
//! channels among the classes; blocks learn from local analytic gradients
//! only, and frozen integrate-and-fire layers carry activations between
//! them as binary spike trains.

// `!(x > 0.0)` is used on purpose so NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod numerics;
pub mod spiking;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
