//! Differentiable SDF volume rendering for self-supervised multi-view crowd
//! counting.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod grad;
pub mod image;
pub mod losses;
pub mod math;
pub mod model;
pub mod renderer;
pub mod seed;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
