//! Cyclical learning-rate / momentum-rate training for micro segmentation
//! networks, with the optimizer family used as fixed-rate baselines, a small
//! reverse-mode autodiff engine, synthetic cardiac phantom data, and an
//! experiment harness on top.

pub mod data;
pub mod error;
pub mod grad;
pub mod harness;
pub mod model;
pub mod optim;
pub mod schedule;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
