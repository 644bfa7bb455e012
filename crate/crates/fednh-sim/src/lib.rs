//! Deterministic single-process simulator of prototype-based federated
//! learning on a synthetic spiral dataset.
//!
//! The crate implements the FedNH protocol (uniform class prototypes on the
//! unit hypersphere, smoothly infused with class semantics through an
//! exponential moving average) together with the FedAvg, FedAvg+UH and
//! purely local baselines, a hand-rolled MLP with exact analytic gradients,
//! non-i.i.d. Dirichlet partitioning, and the evaluation metrics used to
//! compare personalized and global models.
//!
//! Everything is seeded: rerunning an experiment with the same configuration
//! produces bitwise-identical outputs regardless of thread count.

// `!(x > 0.0)` is used on purpose throughout: unlike `x <= 0.0` it also
// rejects NaN, which is exactly what the validation sites need.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod datagen;
pub mod error;
pub mod fedcore;
pub mod hypersphere;
pub mod metrics;
pub mod model;
pub mod run;
pub mod seeding;
pub mod svg;

pub use config::{ExperimentConfig, Method};
pub use error::SimError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SimError>;
