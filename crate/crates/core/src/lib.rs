//! All-attention language models.
//!
//! Self-attention layers whose key/value pool is extended with learned
//! persistent memory vectors, replacing the feedforward sublayer of a
//! transformer. The crate also carries the baseline transformer layer and
//! the ablation variants, adaptive attention span, key/value caching across
//! blocks, adaptive input/softmax, and the training and evaluation loop.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod span;
pub mod training;

pub use error::{Error, Result};
