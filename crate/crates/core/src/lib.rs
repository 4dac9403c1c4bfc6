//! Courtroom mixture of Dirichlet experts.
//!
//! A classifier that outputs, for every input, a second-order distribution over
//! class probabilities built from three per-class quantities: shared evidence
//! `alpha`, advocate plausibility `omega` and advocacy strength `tau`. The crate
//! provides the distribution itself with closed-form moments and samplers, the
//! aleatoric/epistemic uncertainty measures derived from it, a small
//! three-headed network with exact gradients, the training loop, synthetic
//! benchmark data and detection metrics.

pub mod data;
pub mod error;
pub mod eval;
pub mod nnet;
pub mod numerics;
pub mod simplex_dist;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
pub use numerics::{Matrix, MomentSums, Rng};
pub use simplex_dist::{CourtroomParams, DirichletDist, SimplexVec};
pub use uncertainty::UncertaintyReport;
