//! Trace-driven evaluation of hierarchical inference decision modules.
//!
//! A small on-device model classifies every sample; a decision module then
//! either accepts that answer or offloads the sample to a large remote model.
//! This crate ingests per-sample traces of both models' outcomes and compares
//! decision modules under a per-image cost model:
//!
//! - [`trace`]: the JSON Lines trace format, validation, splitting, balancing
//! - [`synth`]: synthetic traces with known calibration ground truth
//! - [`calibration`]: temperature scaling, reliability bins, ECE
//! - [`learners`]: logistic regression, linear SVM and random forest gates
//! - [`policies`]: threshold rules, learned gates and constant baselines
//! - [`evaluation`]: cost per image, confusion counts, threshold and cost sweeps
//! - [`report`]: end-to-end experiment runs and artifact emission
//!
//! With the default `parallel` feature, record-level work runs on rayon;
//! reductions stay ordered so results are identical to sequential runs.

pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod learners;
pub mod policies;
pub mod report;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
pub use exec::Execution;
