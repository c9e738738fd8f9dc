//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records every forward operation with its cached value. Gradients
//! come either as plain tensors ([`Graph::backward`]) or as new graph nodes
//! ([`Graph::backward_graph`]), which lets an unrolled inner loop be
//! differentiated a second time.

mod backward;
mod fd;
mod graph;
pub(crate) mod kernels;
mod meta;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use fd::{finite_diff_oracle, relative_error};
pub use graph::{Graph, NodeId, Primitive, LOGIT_CLAMP};
pub use meta::{meta_gradient, unroll_inner, GradOrder, InnerRate, MetaGradient, NodeMap, Split};
pub use tensor::Tensor;

/// Named parameter tensors, ordered by name.
pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("second-order gradients are unsupported for: {}", primitives.join(", "))]
    Unsupported { primitives: Vec<&'static str> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite function value while perturbing {name}[{index}]")]
    NonFiniteFd { name: String, index: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

/// Adds every tensor of `params` to `graph` as a tracked leaf.
pub fn insert_params(graph: &mut Graph, params: &ParamSet) -> NodeMap {
    params
        .iter()
        .map(|(name, t)| (name.clone(), graph.param(t.clone())))
        .collect()
}
