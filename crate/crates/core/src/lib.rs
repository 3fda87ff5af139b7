//! Retentive sequence decoding for line-level text recognition.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches the
//! filesystem, the clock, or the command line lives in the `retline` crate.
//!
//! Layout:
//!
//! - [`tensor`]: dense f64 tensors and a tape-based reverse-mode autodiff.
//! - [`retention`]: decay matrices, gamma schedules, parallel/recurrent retention.
//! - [`armf`]: attention-retention modality fusion over image+text sequences.
//! - [`model`]: embedders, decoder stack, softmax baseline, loss and optimizer.
//! - [`decode`]: greedy and beam search over recurrent states or KV caches.
//! - [`cost`]: closed-form and instrumented operation and memory counts.
//! - [`data`]: vocabulary, synthetic line rendering, augmentations.
//! - [`metrics`]: edit distance, CER and WER.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod armf;
pub mod cost;
pub mod data;
pub mod decode;
mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod retention;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
