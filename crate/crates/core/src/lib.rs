//! Simulation lab for exposure bias in slate-based implicit-feedback
//! recommenders.
//!
//! A synthetic population chooses from exposed slates; paired datasets differ
//! only in how a small bias set of items is exposed. Discrete choice models
//! and pairwise ranking models are trained on both members of each pair, and
//! the shift in the bias items' predicted ranks measures exposure bias.

pub mod design;
pub mod domain;
pub mod error;
pub mod eval;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngHandle;
