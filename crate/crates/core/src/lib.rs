//! Multi-view clustering by hierarchical UNet fusion of per-view latents and
//! neighbor-averaged contrastive alignment.
//!
//! The pipeline: per-view autoencoders produce latents ([`autoencoder`]), a
//! 1-D UNet fuses them ([`fusion`]), projection heads and a KNN-weighted
//! contrastive loss align fused and per-view embeddings ([`contrastive`]), and
//! K-Means on the fused embedding yields the clustering ([`cluster`],
//! [`metrics`]). [`train`] ties the phases together.

pub mod autoencoder;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
