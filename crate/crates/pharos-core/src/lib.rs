//! Adversarial robustness toolkit for hashing-based retrieval.
//!
//! The pieces, bottom-up:
//! - [`hashcore`]: bit-packed ±1 hash codes and exact Hamming arithmetic;
//! - [`semantics`]: label similarity, pair weighting, and the closed-form
//!   pharos code generator (PGM) with a brute-force optimality oracle;
//! - [`model`]: a small tanh feed-forward hashing network with exact
//!   input/parameter gradients and pairwise-similarity training;
//! - [`attack`]: the PGD engine driving the PgA, PgA†, weighted, HAG, and
//!   anchor-targeted losses under an L∞ budget;
//! - [`retrieval`]: Hamming ranking plus MAP / PR / P@N metrics;
//! - [`data`]: a deterministic synthetic multi-label dataset generator and
//!   the dataset file formats.
//!
//! Floating-point code is generic over [`scalar::Real`]; the aliases below
//! pin the two concrete instantiations.

pub mod adv_train;
pub mod attack;
pub mod data;
pub mod error;
pub mod hashcore;
pub mod model;
pub mod retrieval;
pub mod scalar;
pub mod semantics;

pub use error::{Error, Result};

/// Single-precision hashing network.
pub type HashNet32 = model::HashNet<f32>;
/// Double-precision hashing network (the CLI default).
pub type HashNet64 = model::HashNet<f64>;

/// Single-precision attacked sample.
pub type AdvResult32 = attack::AdvResult<f32>;
/// Double-precision attacked sample.
pub type AdvResult64 = attack::AdvResult<f64>;

/// Double-precision weighted pharos pool.
pub type WeightedPool64<'a> = semantics::WeightedPool<'a, f64>;
