//! Active learning engine with acquisition-successor mismatch mitigation
//! through pseudo-labeling and unlabeled pool subsampling.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`]: datasets, splits and labeled/unlabeled bookkeeping.
//! * [`models`]: the model contract and the built-in model families.
//! * [`strategies`]: informativeness scores and query selection.
//! * [`ups`]: unlabeled pool subsampling.
//! * [`plasm`]: pseudo-labeling of the pool and successor training.
//! * [`simulator`]: emulated annotation loop, metrics and analyses.
//! * [`reporting`]: run persistence, aggregation and export.

pub mod corpus;
pub mod error;
pub mod features;
pub mod metrics;
pub mod models;
pub mod plasm;
pub mod reporting;
pub mod simulator;
pub mod strategies;
pub mod synthetic;
pub mod ups;

pub use error::{Error, Result};

/// Version string recorded in every persisted run.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
