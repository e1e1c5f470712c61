//! Conditional information-gain trellis networks.
//!
//! A trellis is a stack of blocks, each holding several parallel units. Per-block
//! routers trained with a differentiable information-gain objective send every
//! sample down exactly one root-to-leaf path, so inference runs only a slim
//! sub-network per sample.

pub mod analysis;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
mod kernels;
pub mod nn;
pub mod optim;
pub mod presets;
pub mod routing;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod trellis;

pub use error::{Error, Result};
pub use tape::{Padding, Tape, Var};
pub use tensor::{Element, Tensor};
