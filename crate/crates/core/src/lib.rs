//! Domain-incremental learning with globally shared, drift-constrained
//! prototypes.
//!
//! Samples are classified by their distance to learnable per-class prototype
//! banks. From the second stage on, prototypes inherited from earlier stages
//! may only drift by a bounded average amount, enforced through a Lagrange
//! multiplier updated by projected dual ascent.

pub mod constraint;
pub mod error;
pub mod eval;
pub mod gates;
pub mod model;
pub mod numcore;
pub mod replay;
pub mod rng;
pub mod runner;
pub mod streams;

pub use error::{Error, Result};
