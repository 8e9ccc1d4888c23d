//! Positional-encoding-free diffusion transformer at toy scale.
//!
//! Global position comes from 2D causal attention masks, and a single
//! zero-padded convolution after patch embedding adds local position. The
//! crate also includes a Monte-Carlo lab for the variance of causal
//! attention outputs.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod conditioning;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod locality;
pub mod mask;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod variance;

pub use autograd::{Gradients, Tape, Var};
pub use conditioning::Label;
pub use error::{Error, Result};
pub use mask::{AttentionMask, ScanVariant};
pub use model::{BlockOrder, ForwardOptions, Ledit, ModelConfig};
pub use ops::ConvSpec;
pub use rng::RngStream;
pub use tensor::Tensor;
