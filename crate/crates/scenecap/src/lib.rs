//! File formats, checkpoints and the command-line driver for `scenecap-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod json;
pub mod weights;

pub use checkpoint::{Checkpoint, CheckpointConfig};
pub use dataset::{Dataset, TripletRecord};
pub use error::{Error, Result};
