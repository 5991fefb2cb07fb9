//! Trainable cross-modal retrieval engine.
//!
//! Token sequences from two modalities are modeled as per-token Gaussians,
//! refined by reparameterized sampling, aligned with entropic optimal
//! transport, and trained with symmetric contrastive losses. The numeric
//! core is generic over [`scalar::Scalar`] (f32 or f64); the concrete
//! aliases below fix f64, which the model stack uses throughout.

// `!(x > 0)` guards reject NaN along with the out-of-range values; index
// loops over small dense matrices read better than iterator chains here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::manual_is_multiple_of)]

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod dist_head;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ot;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod uprf;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense f64 matrix, the default carrier for all model data.
pub type Tensor = tensor::TensorBase<f64>;
/// f32 variant, matching the on-disk feature format.
pub type Tensor32 = tensor::TensorBase<f32>;
/// f64 autodiff graph.
pub type Graph = graph::Graph<f64>;
