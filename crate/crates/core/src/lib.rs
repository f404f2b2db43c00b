//! Document-level relation graphs over gold entities.
//!
//! Two extractors share one graph model:
//!
//! * [`rules`]: a deterministic, label-driven extractor for synthesis-procedure
//!   text, usable as a baseline or as the initial graph for editing.
//! * [`editor`]: iterative close-first edge editing driven by the neural edge
//!   classifier in [`model`], trained by [`training`].
//!
//! [`numeric`] holds the small reverse-mode autodiff core the classifier runs on.

pub mod corpus;
pub mod editor;
mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod relgraph;
pub mod rules;
pub mod training;

pub use error::{Error, Result};

/// Stable 64-bit FNV-1a hash, used to derive per-document seeds.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
