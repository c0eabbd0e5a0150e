#![cfg_attr(not(test), no_std)]
//! Graph-conditioned caption generation over abstract scene graphs.

extern crate alloc;

pub mod asg;
pub mod decoder;
pub mod encoder;
pub mod metrics;
pub mod error;
pub mod harness;
pub mod model;
pub mod num;
pub mod synth;

pub use error::{Error, Result};
