//! Learning binary, structurally constrained measurement matrices for
//! sparse recovery by backpropagating through unrolled reconstruction
//! solvers.
//!
//! The mask over an index partition is sampled with a straight-through
//! Gumbel top-K estimator ([`gumbel`]), turned into a measurement operator
//! ([`operators`]), and pushed through an unrolled solver ([`solvers`])
//! recorded on a reverse-mode tape ([`diffgraph`]). [`training`] runs the
//! end-to-end loop; [`baselines`] provides greedy and simulated-annealing
//! searches over the same mask space for comparison.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod diffgraph;
mod error;
pub mod gumbel;
pub mod operators;
pub mod rng;
pub mod solvers;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
