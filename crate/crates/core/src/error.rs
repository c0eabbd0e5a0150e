use alloc::string::String;
use alloc::vec::Vec;

use crate::asg::Violation;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must hold a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scene graph violates {} structural rule(s); first: {}", .0.len(), .0.first().map(|v| alloc::format!("{v}")).unwrap_or_default())]
    InvalidGraph(Vec<Violation>),

    #[error("graph has no relationship nodes to sample from")]
    NoRelationships,

    #[error("region {region} is not part of the scene ({available} objects)")]
    DanglingRegion { region: usize, available: usize },

    #[error("node {node} is not grounded in the scene: {detail}")]
    Ungrounded { node: usize, detail: String },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
