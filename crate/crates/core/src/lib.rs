// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibnet;
pub mod cascade;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod rngs;
pub mod scene;

pub use error::{CoreError, Result};
