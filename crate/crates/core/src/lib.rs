//! Exact linear attention.
//!
//! Attention whose kernel factors exactly as `k(a, b) = <phi(a), psi(b)>`
//! can be evaluated in `O(L)` by reordering the sums, with no
//! approximation. This crate provides the kernels, the quadratic and
//! linear attention paths, constant-memory decoding, a small decoder
//! language model built on them, and a byte-level training harness.

pub mod attention;
pub mod error;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
