//! AutoActivator: a constructive class-incremental learner.
//!
//! The model grows one compact "neural unit" per task: random hidden nodes
//! are generated in batches, screened by a supervisory acceptance test on the
//! training residual, and the best batch is recruited. Output weights are
//! refreshed in closed form through an incremental pseudoinverse update, so
//! no gradients are involved. Each unit is frozen when its session ends and
//! carries an activation threshold; at test time a batch is routed to the
//! unit whose threshold its responses match best, which keeps earlier tasks
//! immune to interference.
//!
//! Modules map onto the pipeline:
//! - [`linalg`]: pseudoinverse kernel and stepwise least-squares updates,
//! - [`unit`]: candidate generation, supervisory screening, unit growth,
//! - [`model`]: sequential sessions, threshold routing, persistence,
//! - [`data`]: IDX/feature-file ingestion and task-sequence construction,
//! - [`metrics`]: accuracy matrix, ACA/AIA/BWT, memory-budget accounting,
//! - [`harness`]: experiment runner behind the `aact` command-line tool.

pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod unit;

pub use error::{Error, Result};
pub use linalg::Mat;
