//! Domain-incremental multimodal segmentation with cross-patient hypergraph
//! layers and Tversky-aware losses.
//!
//! The numeric core (tensors, autodiff, hypergraph propagation, losses) is
//! generic over the scalar type; the aliases below fix `f64`, which the
//! training pipeline, file formats, and evaluation all use.

pub mod eval;
pub mod hypergraph;
pub mod loss;
pub mod data;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::tape::{Padding, TapeBase, Var};
pub use tensor::{TensorBase, TensorError};

/// Working-precision tensor used throughout the pipeline.
pub type Tensor = TensorBase<f64>;
/// Working-precision autodiff tape.
pub type Tape = TapeBase<f64>;
