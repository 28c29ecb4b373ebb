//! Deterministic federated-learning simulator.
//!
//! The crate provides a small reverse-mode differentiation engine, an MLP
//! with an explicit backbone/head split, synthetic datasets with
//! class-disjoint partitioners, manifold-reshaping losses (intra-class
//! decorrelation and prototype-margin inter-class terms), the federated
//! round protocol with prototype aggregation, and analysis instruments for
//! the collapse metric, the classifier-shift construction and the
//! convergence recursion. The `fedmr` binary drives experiments from JSON
//! configs.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
