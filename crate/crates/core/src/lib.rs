// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod infer_eval;
pub mod losses;
pub mod model;
pub mod objects;
pub mod shots;
pub mod nn;

pub use error::{Error, Result};
