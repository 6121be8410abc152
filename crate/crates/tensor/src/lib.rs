//! Reverse-mode differentiable tensors for the semantic-link codec.
//!
//! The engine is deliberately small: dense row-major tensors, a per-sample
//! tape ([`Graph`]), the handful of primitives the codec uses, Adam, seeded
//! random streams, and a finite-difference gradient checker.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, Differentiable, GradCheckReport, Precision};
pub use graph::{CustomOp, Graph, Var, GDN_BETA_FLOOR};
pub use param::{Bindings, Param, ParamId, ParamStore};
pub use rng::{RngStream, Sampler};
pub use scalar::Scalar;
pub use tensor::Tensor;
