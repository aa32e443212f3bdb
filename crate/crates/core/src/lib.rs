//! Desk-scale transformer lab for attention-block variants.
//!
//! The library implements a small dense-tensor kernel set with reverse-mode
//! autodiff, an attention block zoo (baseline, nonlinear pre-projection,
//! learned content-skip bypass, LoRA injection), a decoder-only model
//! assembly with KV-cache incremental decoding, a frozen-probe training
//! loop (AdamW + cosine schedule), and the analysis passes that account for
//! parameter overhead, cache footprint, and per-layer skip-weight norms.
//!
//! Everything runs on one CPU core in seconds at the desk-scale reference
//! configuration (byte vocabulary, `d_model = 64`, 4 heads, 4 layers).

pub mod analyze;
pub mod blocks;
pub mod checkpoint;
pub mod checks;
pub mod error;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod runconfig;
#[cfg(target_arch = "x86_64")]
pub mod simd;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{check_gradient, Tape, Var};
pub use tensor::{Real, Tensor};
