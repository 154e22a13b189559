//! Core library for measuring token-level probability shifts under
//! group-relative policy optimization on a small autoregressive policy.

pub mod batching;
pub mod cancellation;
pub mod checkpoint;
pub mod coupling;
pub mod displacement;
pub mod error;
pub mod grpo;
pub mod numeric;
pub mod policy;
pub mod report;
pub mod pretrain;
pub mod rng;
pub mod stats;
pub mod task;
pub mod value;

pub use error::{Error, Result};
