#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
mod exec;
pub mod linalg;
pub mod metrics;
pub mod moltypes;
pub mod netmodel;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
