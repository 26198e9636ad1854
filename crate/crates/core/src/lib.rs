//! Gradient attacks boosted by ensembles of post-training model mutants.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small CNN engine with exact analytic gradients
//! - [`mutation`]: the five weight/neuron-level mutation operators
//! - [`diversity`]: linear CKA, PageRank ranking and greedy diverse generation
//! - [`ensemble`]: simple-average ensembles of the original model and its mutants
//! - [`attacks`]: FGSM, BIM, PGD and C&W-L2 over any [`attacks::GradientProvider`]

pub mod attacks;
pub mod data;
pub mod diversity;
pub mod ensemble;
pub mod error;
mod gemm;
pub mod mutation;
pub mod nn;
pub mod tensor;

pub use data::Dataset;
pub use error::{Error, ModelIoError, Result};
pub use nn::{LossGradient, LossKind, Network};
pub use tensor::Tensor;
