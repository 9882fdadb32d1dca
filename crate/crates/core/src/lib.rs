//! Adaptive-rank low-rank adaptation.
//!
//! Adapters take the SVD-like form `ΔW = B·Diag(v)·A`. An l1 penalty on the
//! gate vector `v`, handled by a proximal soft-thresholding step, drives gates
//! to exact zeros so the adapter rank shrinks to what the task needs. `A` and
//! `B` are trained with AdamW under a cosine schedule; the two blocks alternate
//! every optimization step.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model_kit;
pub mod prox_optimizer;
pub mod tasks;

pub use error::{Error, Result};

/// Version string embedded in emitted artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
