//! Detection and mitigation of repetition loops in autoregressive decoding.
//!
//! - [`metrics`]: sequence-level diversity metrics and the loop rule.
//! - [`monitor`]: streaming warning signals and trigger logic.
//! - [`cache`]: positioned KV cache with baseline eviction policies.
//! - [`pruner`]: keep-set construction applied on trigger.
//! - [`rope`]: RoPE attention, shift-invariance checks, barcode export.
//! - [`harness`]: synthetic scenarios and policy comparison.

pub mod cache;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod monitor;
pub mod pruner;
pub mod rope;

pub use error::{Error, Result};
