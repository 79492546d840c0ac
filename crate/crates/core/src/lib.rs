// Scalar casts are no-ops under f64 but required with the `f32` feature.
#![allow(clippy::unnecessary_cast)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod model;
pub mod nn;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
