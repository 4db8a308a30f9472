//! Real-NVP generators trained by maximum likelihood and by Wasserstein
//! critics, with exact-density and critic-based evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod critic;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flow::{FlowModel, Half};
pub use graph::{Graph, NodeId, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
