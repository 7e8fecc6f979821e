//! Dense `f64` tensors and a static computation graph with reverse-mode
//! differentiation.
//!
//! Graphs are assembled with [`GraphBuilder`], which checks shapes eagerly, and
//! evaluated with a [`Session`]. Every node output is checked for finiteness.

mod error;
mod gradcheck;
mod graph;
mod ops;
mod session;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use graph::{Graph, GraphBuilder, InputSpec, NodeId};
pub use ops::guard_warp_row;
pub use session::{BatchStats, Diagnostic, DiagnosticKind, Session};
pub use tensor::Tensor;

/// Smallest magnitude accepted as a denominator (and the clamp floor for
/// guarded operations).
pub const EPS_DIV: f64 = 1e-8;

/// Variance floor used by batch normalisation.
pub const BN_EPS: f64 = ops::BN_EPS;
