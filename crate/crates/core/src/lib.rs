//! Fair multi-task learning for binary classification with a binary
//! protected attribute.
//!
//! A multi-head feed-forward network starts with a fully shared trunk.
//! During training, parameter similarity between task-specific layers
//! drives a bottom-up branching schedule: related tasks keep sharing
//! layers, unrelated ones get their own copies. Fairness gradients on the
//! branched layers are projected to stop them from undoing accuracy
//! progress, and vice versa.

pub mod branching;
pub mod checkpoint;
pub mod conflict;
pub mod data;
pub mod error;
pub mod grouping;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
