#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod error;
pub mod field;
pub mod imageio;
pub mod metrics;
pub mod optics;
pub mod raster;
pub mod render;
pub mod sampling;
pub mod scatter;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
