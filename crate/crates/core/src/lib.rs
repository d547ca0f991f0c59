//! Planning engine for small-area prevalence surveys.
//!
//! Given a census-style cross-classified population table, the crate fits
//! hierarchical binomial-logit models with spatial and exchangeable random
//! effects, scores per-cell reliability against the official 20% relative
//! standard error rule, and searches for the smallest effective sampling
//! fraction whose suppression risk is acceptable. A design-based simulation
//! harness validates the model-based answers by repeated sampling from the
//! true table.

pub mod cells;
pub mod commands;
pub mod config;
pub mod designsim;
pub mod error;
pub mod math;
pub mod model;
pub mod planning;
pub mod population;
pub mod reliability;
pub mod report;
pub mod sampling;
pub mod ssd;

pub use error::{Error, Result};
