//! Training system for growing, self-pruning densely connected CNNs.
//!
//! Weights are multiplied by stochastic binary gates trained through a
//! Gumbel-Softmax straight-through estimator; an L1 penalty on sampled-open
//! gates prunes the network during optimization, and the architecture grows
//! (channels plus one layer per block) whenever the open-gate count stops
//! moving. See the `gnap` binary for the command-line interface.

pub mod gating;
pub mod grow;
pub mod net;
pub mod scalar;
pub mod tensor;

pub use gating::{GateSet, Granularity};
pub use net::{Architecture, NetSettings, Network};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};
