//! Tabular simulation lab for preference tuning of recommenders.
//!
//! A synthetic catalog with Zipf popularity stands in for logged data, a
//! softmax table stands in for the language model, and SFT, DPO and the
//! self-play loop are run as full-batch gradient descent on that table.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod catalog;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod policy;
pub mod rng;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
