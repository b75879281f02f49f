//! Learning a single pooled flow-to-speed congestion function per city and
//! road priority, with per-segment BPR fits as the parametric baseline.
//!
//! Modules follow the pipeline order: [`domain`] data and filtering rules,
//! [`synthgen`] synthetic cities with known ground truth, [`features`] and
//! [`mlp`] for the pooled model, [`bprfit`] for the baseline, and [`eval`]
//! for every evaluation protocol. [`io`] holds the CSV/JSON file formats.

pub mod bprfit;
pub mod domain;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod mlp;
pub mod synthgen;

pub use error::{Error, Result};
