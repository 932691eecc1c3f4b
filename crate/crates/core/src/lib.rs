//! Geographically weighted classification of categorical outcomes over
//! georeferenced units.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod forest;
pub mod gw;
pub mod kernels;
pub mod linear;
pub mod pipeline;
pub mod spatial_stats;
pub mod synth;
pub mod varsel;

pub use error::{Error, ErrorKind, Result};
