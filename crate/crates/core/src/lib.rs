// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod dcc;
pub mod error;
pub mod escaviar;
pub mod linalg;
pub mod optimizer;
pub mod par;
pub mod portopt;
pub mod scoring;
pub mod simulate;
pub mod stats;
pub mod timeseries;

pub use error::{Error, Result};
