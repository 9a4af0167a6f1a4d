//! Simulation and analysis toolkit for characterizing a surface ion trap
//! with integrated photonics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beam;
pub mod charging;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod heating;
pub mod lsq;
pub mod report;
pub mod rng;
pub mod sim;
pub mod thermometry;
pub mod units;

pub use error::{Error, Result};
