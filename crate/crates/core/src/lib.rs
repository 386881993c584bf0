// `!(x > 0.0)` style guards are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bias;
pub mod error;
pub mod geometry;
pub mod ifv;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod sim;
pub mod targets;

pub use error::{Error, Result};
