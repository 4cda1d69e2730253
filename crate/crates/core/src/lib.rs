//! Decision-level ordinal scoring for rubric-based assessment.
//!
//! The scoring decision is taken on a length-`K+1` vector of score-wise logits
//! gathered from a backbone's vocabulary logits. On top of that vector the crate
//! provides a decision-level gated fusion of two modality branches, a
//! cross-entropy objective with an optional distance-aware SmoothL1 term weighted
//! by a learnable mixing coefficient, and Quadratic Weighted Kappa evaluation.
//!
//! A small two-layer tanh encoder stands in for the language model so the whole
//! pipeline can be trained and verified on synthetic or file-based feature data.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod score_space;

pub use error::{DlomError, Result};
pub use score_space::{decide, extract_score_logits, ScoreLogits, ScoreScale, ScoreTokenSet};
