//! Self-supervised dense correspondence learning and label propagation for video.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod backbone;
pub mod cli;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod propagation;
pub mod synth;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
