//! Availability-poisoning workbench.
//!
//! Poison generators (AP, UE, RUE, CP, LSP, OPS, CUDA), supervised and
//! self-supervised training loops including the adversarially-augmented
//! SSL+SL defense (VESPR), augmentation baselines, and representation
//! geometry metrics, all sized to run on a CPU in minutes.

pub mod adversary;
pub mod augment;
pub mod bench;
pub mod config;
pub mod analysis;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod poisoncraft;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

/// Version string embedded in every artifact.
pub const ARTIFACT_VERSION: &str = concat!("poisonforge/", env!("CARGO_PKG_VERSION"));
