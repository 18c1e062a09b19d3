//! Linear self-attention with trainable feedforward kernel feature maps.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a single-use reverse-mode graph.
//! - [`kernels`]: positive feature maps (Softplus FFN, GLU, OGLU, AOGLU),
//!   orthogonal initialization and the orthogonality penalty.
//! - [`attention`]: exact softmax attention, the quadratic kernel oracle and
//!   the linear factorized evaluator, plus the multi-head wrapper.
//! - [`model`]: a small pre-norm encoder with classification and matching
//!   heads, parameter accounting and checkpoints.
//! - [`data`]: synthetic task generators and TSV ingestion.
//! - [`harness`]: training, multi-seed runs, benchmarks and the `verify`
//!   suite behind the `kattn` binary.

pub mod error;
pub mod harness;
pub mod real;
pub mod attention;
pub mod data;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{GradMap, Graph, ParamId, Tensor, Var};
