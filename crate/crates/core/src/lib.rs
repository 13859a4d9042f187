//! Dual-stream video/structure co-generation model on a procedural blob world.
//!
//! Everything here is `no_std` + `alloc`; file formats, the CLI and threading
//! live in the `cointeract` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod blobworld;
pub mod flops;
pub mod humoe;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod real;
pub mod sampling;
pub mod tokenization;
pub mod training;

pub use backbone::{build_mask, AttnMask, Cond, ForwardInput, ForwardMode, MaskMode, ModelConfig, ModelError, ModelState};
pub use humoe::{MoeConfig, Phase};
pub use real::Real;
pub use tokenization::{RegionLabel, StreamMode, TokenRole, TokenSequence};
