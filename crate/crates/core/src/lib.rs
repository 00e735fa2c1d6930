//! Compressed-sensing-guided dynamic sparse execution on synthetic instances.
//!
//! The crate models sparse-subnetwork selection as a measurement-and-recovery
//! loop: a structured dictionary maps unit coefficients to latent features,
//! random operators sketch those features, structured solvers recover the
//! active support under hardware-feasible constraints, and an entropy-driven
//! controller adapts the per-step measurement budget. A closed-loop simulator
//! and a joint token/subnetwork budget allocator sit on top, with experiment
//! drivers that emit deterministic CSV sweeps.

pub mod allocator;
pub mod controller;
pub mod dictionary;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod recovery;
pub mod seed;
pub mod sensing;
pub mod simulator;

pub use error::{Error, Result};
