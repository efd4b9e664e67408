//! Compact latent-set shape autoencoder with triplane decoding,
//! uncertainty-guided token pruning and EDM latent diffusion, on candle's CPU
//! backend.
//!
//! The guide in `book/` walks through each stage; its snippets run as
//! doctests of this crate.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod export;
pub mod fields;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/autoencoder.md")]
    mod autoencoder {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
