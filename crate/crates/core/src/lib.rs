// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coarse;
pub mod error;
pub mod fine;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod preprocessing;
pub mod volume;

pub use error::{Error, Result};
