//! Streaming chunk-wise video latent generation at toy scale: a causal
//! backbone/refiner diffusion transformer over a pre-RoPE KV cache, an
//! overlapped three-stage pipeline, a full-duplex session runtime and a
//! distillation lab on an analytic teacher.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail the check

pub mod checkpoint;
pub mod denoise;
pub mod distill;
pub mod error;
pub mod kvcache;
pub mod latcore;
pub mod maskgen;
pub mod pipeline;
pub mod ropekit;
pub mod runtime;
pub mod toydit;

pub use error::{LpmError, Result};
