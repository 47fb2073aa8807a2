// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod head;
pub mod metrics;
pub mod numerics;
pub mod providers;
pub mod render;
pub mod scene;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
