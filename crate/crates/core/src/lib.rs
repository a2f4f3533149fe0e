//! Measuring how unlearnable a poisoned training set is.
//!
//! Small dense models are trained on clean and perturbed copies of a dataset.
//! Each epoch checkpoint is probed for per-layer sharpness-aware learnability
//! (the largest loss change reachable by perturbing one layer inside an
//! epsilon ball), and the probes are reduced to a learnable-layer count and the
//! unlearnable distance: the ratio of average learnable counts between the
//! poisoned and the clean run.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod diffcore;
pub mod error;
pub mod io;
pub mod landscape;
pub mod pipeline;
pub mod poisons;
pub mod sal;
pub mod seed;
pub mod trainer;
pub mod unlearnability;

pub use error::{Error, Result};
