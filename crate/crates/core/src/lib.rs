//! Toy-scale engine for next-scale autoregressive image generation with
//! collaborative decoding: a large drafter model generates the coarse scales,
//! then a small refiner takes over for the fine scales after an explicit
//! KV-cache handoff (the drafter's cache is released, the refiner re-ingests
//! the drafted tokens under a block-causal mask).
//!
//! Alongside the decoding engine itself the crate ships:
//!
//! * a multi-scale residual vector quantizer and toy feature decoder,
//! * exact KV-cache byte accounting plus an analytic memory model,
//! * per-scale latency profiling,
//! * radial Fourier spectrum analysis of per-scale contributions,
//! * cross-entropy / KL loss kernels (with closed-form logit gradients) for
//!   specializing the drafter and refiner to their own scale ranges.
//!
//! All heavy inner loops (matmuls, attention, per-cell quantization) are
//! data-parallel via rayon when the default `parallel` feature is enabled and
//! degrade to plain sequential loops without it. Results are independent of
//! the parallelism degree.

pub mod analysis;
pub mod error;
pub mod finetune;
pub mod model;
pub mod orchestrator;
mod par;
pub mod plan;
pub mod pyramid;
pub mod quantizer;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
