//! Vision-language fusion through tanh-gated cross-attention.
//!
//! A small ViT-style encoder exposes hierarchical features from several
//! depths; a decoder-only language model reads them through a gated
//! cross-attention block placed before every decoder layer, with per-image
//! learnable media tokens standing in for each image in the text stream. The
//! cross-attention FFN can be upcycled into a fine-grained mixture of experts
//! with an always-on world expert. [`flops`] evaluates the analytical
//! training-cost model comparing this layout with plain concatenation.
//!
//! Everything runs on a small `f64` reverse-mode engine in [`numerics`].

pub mod cli;
pub mod config;
pub mod error;
pub mod ffn;
pub mod flops;
pub mod fusion;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod params;
pub mod vision;

pub use error::{Error, Result};
