//! Core pipeline for inferring piped-water and sewage access from
//! satellite image tiles: a small differentiable tensor library, a
//! Vision Transformer encoder, DINO-style self-distillation training,
//! frozen-embedding k-NN classification, and population-weighted
//! national aggregation with validation against official statistics.
//!
//! This crate is `no_std`-compatible (with `alloc`); file formats, the
//! CLI, and everything touching the filesystem live in the companion
//! `geosdg` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod aggregate;
pub mod dino;
pub mod error;
pub mod ingest;
pub mod knn;
pub mod numerics;
pub mod rng;
pub mod vit;

pub use error::{Error, Result};
