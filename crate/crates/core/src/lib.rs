//! Simulator for silent data corruption from permanent and intermittent GPU
//! faults during language-model pre-training.
//!
//! A small decoder-only transformer is trained under emulated FP16, BF16 or
//! FP8 mixed precision while a fault engine corrupts hooked tensors at the
//! bit level. Runs are classified against a fault-free baseline by final
//! perplexity, NaN history and weight divergence.

pub mod analysis;
pub mod campaign;
pub mod data;
pub mod error;
pub mod faultengine;
pub mod float_serde;
pub mod model;
pub mod signatures;
pub mod softfp;
pub mod tensorops;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
