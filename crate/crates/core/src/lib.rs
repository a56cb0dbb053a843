//! Core numerics for a multiscale memory comparator transformer.
//!
//! Everything in this crate is pure computation over dense tensors: a small
//! reverse-mode differentiation graph, attention and decoder blocks, the
//! multiscale memory/query decoding schedules, the few-shot and automatic
//! video segmentation pipelines, synthetic episode generation, and the
//! evaluation bench (metrics, corruptions, frequency filters, sweeps).
//!
//! The crate is `no_std`-compatible (with `alloc`); all file formats, CLI
//! handling and report serialization live in the companion `mmct-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod episodes;
pub mod error;
pub mod evalbench;
pub mod msdecode;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};
