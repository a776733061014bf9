//! Column-wise post-training weight quantization with error compensation.
//!
//! Engines range from plain round-to-nearest through a dense inverse-Hessian
//! reference, Cholesky-based GPTQ, and GPTQ with a first-order drift term.
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod engines;
pub mod error;
pub mod linalg;
pub mod matrix;
pub mod par;
pub mod quantizer;
pub mod report;
pub mod tensorio;
pub mod verify;

pub use engines::{run_engine, EngineConfig, EngineKind, EngineOutput, FirstOrderSign, LayerBundle, ScaleSource};
pub use error::{Error, Result};
pub use linalg::{inverse_cholesky, HessianState, InvCholFactor};
pub use matrix::DenseMatrix;
pub use par::Exec;
pub use quantizer::{QuantGrid, QuantizedLayer};
pub use report::LayerReport;
