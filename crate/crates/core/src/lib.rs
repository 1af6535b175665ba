//! Hierarchical masked entropy coding of vector-quantized token grids.
//!
//! The crate covers tokenization ([`tokens`]), deterministic masking
//! schedules ([`schedules`]), conditional probability models
//! ([`probmodel`]), range coding and the `.pcv2` container ([`coder`]),
//! multi-scale token maps ([`multiscale`]), a small conditional flow-matching
//! lab ([`flowlab`]) and the rate benchmark ([`harness`]).

// `!(x > 0.0)` is how NaN gets rejected; index loops mirror the matrix maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod coder;
pub mod error;
pub mod flowlab;
pub mod harness;
pub mod multiscale;
pub mod probmodel;
pub mod schedules;
pub mod tokens;

pub use error::{Error, Result};
