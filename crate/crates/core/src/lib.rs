// Negated float comparisons (`!(x > 0.0)`) are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod desc_train;
pub mod det_train;
pub mod error;
pub mod eval;
pub mod featuremap;
pub mod geometry;
pub mod image;
pub mod inference;
pub mod real;
pub mod sampling;
pub mod search;
pub mod synth;
pub mod tinynet;

pub use error::{Error, Result};
