//! Few-shot classification on precomputed encoder features.
//!
//! Low-level feature maps are unfolded into multi-scale 2×2 windows and
//! reduced to two-channel (max, mean) units; the support set's units, global
//! embeddings and class text embeddings form a frozen cache. A single
//! pointwise 1-D convolution per layer is trained to map query windows into
//! the same unit space, and the final logits sum the local, global and text
//! branches.

pub mod adapter;
pub mod batch;
pub mod cache_model;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod fusion;
pub mod meta_feature;
pub mod numerics;
pub mod par;

pub use error::{Error, Result};
pub use meta_feature::Layer;
pub use numerics::{Real, Tensor};
