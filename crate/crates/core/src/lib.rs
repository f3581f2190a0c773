//! Hierarchical residual network with a compact triplet-center loss.
//!
//! The crate is organized around a small reverse-mode autodiff tensor type
//! ([`tensor::Tensor`]) on top of which the residual blocks, the hierarchical
//! network, the metric losses and an experiment harness are built. Everything
//! runs on CPU in double precision; all randomness flows from explicit seeds.

pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod network;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::Mode;
pub use tensor::Tensor;
