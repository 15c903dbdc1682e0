//! Calibrated top-K re-ranking for recommender systems.
//!
//! The crate covers the whole offline loop: ingest MovieLens-style ratings,
//! split them temporally, score candidates, re-rank each user's list so its
//! genre mix tracks the user's history (scaled by how much history there is),
//! and measure the outcome with accuracy, calibration and coverage metrics.
//!
//! The re-ranker solves, per user,
//!
//! ```text
//! max  sum(score over selected K items) - lambda * TV(p(.|u), q(.|calibration subset))
//! ```
//!
//! where the calibration subset holds `round(W(u) * K)` of the selected items
//! and `W(u)` grows with the user's profile size.

pub mod confidence;
pub mod data;
pub mod distribution;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod rerank;
pub mod scoring;
pub mod synthetic;

pub use error::{Error, Result};

/// User identifier as it appears in the input files.
pub type UserId = u64;
/// Item identifier as it appears in the input files.
pub type ItemId = u64;
