//! Differentiable weighted ICP registration for radar pointclouds.
//!
//! The crate covers the full pipeline: rigid-transform geometry, pointcloud
//! containers with nearest-neighbour search, a weighted robust ICP solver, a
//! reverse-mode gradient path through unrolled solver iterations, radar
//! point extraction, learned weight masks, a small mask trainer, and an
//! evaluation harness for localization experiments.

pub mod cloud;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grad;
pub mod icp;
pub mod mask;
pub mod radar;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
