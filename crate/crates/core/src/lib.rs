//! Decision-focused causal learning for multi-treatment budget allocation.
//!
//! The crate is organized bottom-up:
//!
//! - [`data`]: samples, datasets, prediction matrices, CSV ingestion
//! - [`mckp`]: Lagrangian allocation, exhaustive oracle, expected outcome metric
//! - [`scalar`], [`net`], [`autodiff`]: MLP engine with gradients and
//!   matrix-free second-order products
//! - [`losses`]: prediction, decision and surrogate decision losses
//! - [`bilevel`]: teacher/baseline training, single-level and bi-level trainers
//! - [`synth`]: synthetic populations with known potential outcomes

pub mod autodiff;
pub mod bilevel;
pub mod data;
pub mod error;
pub mod losses;
pub mod mckp;
pub mod net;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
