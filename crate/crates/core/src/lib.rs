//! Conv+BatchNorm blocks in Train, Eval, Tune and Deploy modes.
//!
//! The crate contains a small dense tensor type, hand-written conv/BN kernels
//! with their backward passes, a [`block::ConvBnBlock`] that switches between
//! the four execution modes, a graph IR with a Conv->BN rewrite pass, an
//! analytic model of the activations each mode retains for backward, and the
//! experiment harness behind the `convbn` binary.

pub mod block;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod harness;
pub mod io;
pub mod memory;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use block::{BlockGrads, ConvBnBlock, Mode, Saved};
pub use error::{Error, Result};
pub use graph::Graph;
pub use rng::Rng;
pub use tensor::{DType, Shape, Tensor};
