//! Numerical lower and upper bounds for the invariance entropy of control-affine
//! systems, specialised to bilinear systems and their induced flows on real
//! projective space.
//!
//! The pipeline discretises projective space into a grid, builds a weighted
//! transition graph whose edge weights are one-step unstable log-determinants,
//! extracts chain control sets as strongly connected components, and then
//! evaluates both sides of the entropy sandwich:
//!
//! * lower bound: minimum mean cycle of the unstable-determinant cocycle over a
//!   chain control set, minus a finite-horizon fiber-entropy surrogate;
//! * upper estimate: a greedy spanning cover of a compact cell set, with the
//!   uncoverable remainder charged by survivor-volume quotas.
//!
//! Everything stochastic takes an explicit seed and derives per-worker
//! substreams, so pipeline outputs are bitwise reproducible.

pub mod bounds;
pub mod bowen;
pub mod cocycle;
pub mod config;
pub mod control;
pub mod error;
pub mod escape;
pub mod fibers;
pub mod graph;
pub mod grid;
pub mod linalg;
pub mod pipeline;
pub mod projective;
pub mod survivor;
pub mod system;

pub use error::{Error, Result};
