//! Incremental max-entropy inverse reinforcement learning with occluded
//! demonstrations.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod budget;
pub mod confidence;
pub mod error;
pub mod experiment;
pub mod latent;
pub mod maxent;
pub mod mdp;
pub mod patrol;
pub mod session;
pub mod trajio;

pub use error::{IrlError, Result};
