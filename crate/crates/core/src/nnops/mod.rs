//! Structured neural-network operations with forward and backward rules.
//!
//! The differentiable ops are methods on [`Var`](crate::tensor::Var):
//! `conv2d`, `pad2d`, `avgpool2d`, `maxpool2d`, `global_avg_pool`,
//! `upsample_nn`, `layernorm`, `softmax`, `linear`, `activation`,
//! `channel_shuffle`, `channel_split`/`channel_concat` and `mul_channels`.
//! Layers that own parameters live in [`layers`].

mod channel;
mod conv;
pub mod layers;
mod pointwise;
mod pool;

pub use channel::shuffle_permutation;
pub use conv::{ConvSpec, PadMode, Padding};
pub use layers::{Conv2d, LayerNorm, Linear, SqueezeExcite};
pub use pointwise::Activation;
