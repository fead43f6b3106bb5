//! Extended influence functions for two-encoder contrastive models.
//!
//! A pair in a contrastive batch plays two roles: it is a positive for its own
//! pairing losses and a negative inside every other softmax denominator of its
//! batch. This crate trains small text/image encoders, splits a subset's
//! influence into those two parts, edits parameters without retraining, and
//! checks the result against exact retraining.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fmt17;
pub mod io;
pub mod model;
pub mod contrastive;
pub mod influence;
pub mod numerics;
pub mod oracle;
pub mod scores;
pub mod workflow;

pub use error::{Error, Result};

/// Guide chapters, compiled as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/influence.md")]
    mod influence {}
    #[doc = include_str!("../../../book/src/scores.md")]
    mod scores {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
