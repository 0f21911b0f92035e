//! Streaming dual-stream diffusion on a synthetic audio/video latent world.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, autodiff, RNG, checkpoints, Adam.
//! - [`masks`]: block-causal and future-expanding attention masks.
//! - [`synthworld`]: the coupled linear-Gaussian world and its oracles.
//! - [`model`]: the dual-stream transformer and its KV cache.
//! - [`flow`]: rectified-flow noising, sampling and teacher training.
//! - [`streaming`]: block-wise generation with a provisional audio block.
//! - [`rewards`]: batch-standardized, exponentiated reward weights.
//! - [`distill`]: trajectory regression and reward-weighted DMD.

pub mod distill;
pub mod error;
pub mod flow;
pub mod masks;
pub mod model;
pub mod numerics;
pub mod rewards;
pub mod streaming;
pub mod synthworld;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/streaming.md")]
    mod streaming {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
