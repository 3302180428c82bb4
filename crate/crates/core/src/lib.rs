//! Multi-scale projection transformer for single-image snow removal.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`nnops`]: convolution, pooling, normalization and channel operations.
//! - [`attention`]: multi-scale projection self-attention and its ablations.
//! - [`blocks`]: transformer block, ConvFFN, local capture block, parallel stage.
//! - [`model`]: the encoder–decoder network, cost accounting, checkpoints.
//! - [`snowsynth`]: synthetic snowy/clean image pairs.
//! - [`train`]: loss, optimizer, schedule, metrics, training and evaluation.
//! - [`cli`]: configuration files, image I/O and the `mspf` commands.

pub mod attention;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod model;
pub mod nnops;
pub mod params;
pub mod snowsynth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Scalar, Tape, Tensor, Var};
