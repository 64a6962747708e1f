//! Dense differentiable numerical core for the pose-based two-stream
//! relational network: tensors with gradients, a reverse-mode tape with the
//! handful of operations the model needs, an Adam optimizer with parameter
//! freezing, a finite-difference gradient checker, and a binary checkpoint
//! format.
//!
//! All math is generic over the scalar type ([`Scalar`]: `f32` or `f64`);
//! the rest of the workspace uses the `f64` aliases exported below.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Activation, Graph, NodeId};
pub use mlp::MlpSpec;
pub use params::ParameterSet;
pub use scalar::Scalar;
pub use tensor::TensorBuffer;

/// Concrete 64-bit aliases; the model crates pin to these.
pub type Tensor64 = TensorBuffer<f64>;
pub type Params64 = ParameterSet<f64>;
pub type Graph64 = Graph<f64>;
pub type AdamState64 = AdamState<f64>;
