//! Desk-scale speculative decoding lab.
//!
//! A byte-level target transformer is trained once and frozen; lightweight
//! draft heads (non-autoregressive `medusa` and autoregressive `eagle`
//! styles, each with a configurable stack depth `K`) predict upcoming tokens
//! from the target's last hidden states. A lossless draft-then-verify engine
//! accepts or resamples drafted tokens so the output distribution always
//! matches the target's, and a benchmark harness measures acceptance lengths,
//! per-position acceptance rates, and walltime speedups across the head grid.
//!
//! Heads are trained by distilling the frozen target's output distributions,
//! optionally combined with an adversarial discriminator that learns to tell
//! draft logits from target logits while the head learns to fool it.

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dist;
pub mod engine;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod target;
pub mod tensor;

pub use error::{Error, Result};
