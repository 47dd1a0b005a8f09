//! Consistent video retrieval over frozen embeddings.
//!
//! The crate mines hard-negative retrieval benchmarks from step
//! annotations, trains a residual state-transition adapter (and the
//! baselines it is compared against) with hand-written gradients, and
//! evaluates candidates with accuracy, mean rank and per-negative-type
//! diagnostics. A synthetic procedural world with known latent structure
//! makes the whole pipeline checkable without any foundation model.

pub mod adapter;
pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{CvrError, Result};
