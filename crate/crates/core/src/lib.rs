//! Desk-scale, CPU-only implementations of the core mechanisms used by
//! large MoE transformers: multi-head latent attention with a compressed
//! KV cache, sigmoid-gated expert routing with bias-based load balancing,
//! multi-token prediction, software-emulated FP8 linear algebra, pipeline
//! schedule simulation, all-to-all dispatch modeling, and group-relative
//! policy optimization.
//!
//! Everything computes in `f64` on a reverse-mode gradient tape so that
//! every loss in the crate can be checked against finite differences.
//! Hot inner loops (GEMMs, quantization, batched routing) run on rayon
//! when the default `parallel` feature is enabled and fall back to
//! sequential code without it; both paths produce bit-identical results.

pub mod comm;
pub mod fp8;
pub mod gradcheck;
pub mod grpo;
pub mod mla;
pub mod model;
pub mod moe;
pub mod mtp;
pub mod pipeline;
pub mod tensor;

pub(crate) mod parallel;

mod error;

pub use error::{Error, Result};
