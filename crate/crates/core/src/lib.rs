//! Mutual-information regularized chain-of-thought distillation.
//!
//! A student is trained jointly on label prediction and rationale generation
//! (both tasks share every parameter and differ only in their input prefix),
//! with an auxiliary cross-entropy term between the vocabulary distributions
//! of the two tasks. The crate also carries an exact discrete MI oracle for
//! checking the variational bound behind that term, and the evaluation suite
//! (accuracy, confidence, ECE, rationale quality, Pearson correlation).

#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod trainer;
pub mod types;

pub use config::{ConfidenceMode, LossWeights, MiVariant, RunConfig, StopTarget};
pub use error::{Error, Result};
pub use types::{Example, TaskKind, TokenId, Vocabulary};
