//! Desk-scale laboratory for normalization-free transformer experiments.
//!
//! The crate contains a small reverse-mode engine ([`autograd`]), a GPT-style
//! decoder with switchable normalization/attention/FFN/position variants
//! ([`model`]), deterministic data streams ([`data`]), an AdamW trainer with
//! checkpointing ([`train`]), the saturation and geometry instruments
//! ([`probes`]), the DyT screening procedure ([`screening`]) and the
//! statistics used to compare runs ([`stats`]).

pub mod autograd;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod model;
pub mod probes;
pub mod screening;
pub mod stats;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
