//! Normalizing flows with batch normalization, trained by maximum likelihood,
//! and out-of-distribution detectors that exploit how batch statistics shift a
//! sample's likelihood.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod train;

pub use data::{Dataset, Label};
pub use error::{Error, Result};
pub use flow::{EvalMode, FlowConfig, FlowModel};
