//! Minimal reverse-mode automatic differentiation for small convolutional
//! networks on the CPU.
//!
//! A [`Graph`] records tensor operations as they execute; calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every node that requires one. Parameters live
//! outside the graph in a [`ParamSet`] and are bound into each new graph as
//! either trainable leaves or constants.
//!
//! Every op is generic over [`Float`] so the same code trains in `f32` and is
//! gradient-checked in `f64`.

mod adam;
mod float;
mod graph;
mod linalg;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use float::Float;
pub use graph::{ConvSpec, Grads, Graph, NodeId};
pub use params::{Bound, ParamSet};
pub use tensor::Tensor;

/// Errors raised by graph construction.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("node {0} is not a scalar")]
    NotScalar(usize),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NnError::Shape {
        op,
        detail: detail.into(),
    })
}
