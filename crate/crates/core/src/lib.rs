//! Multitask prior-data fitted network for tabular classification.
//!
//! The crate is organized around a small dense-tensor autodiff kernel
//! ([`tape`]), a structural-causal-model prior that generates synthetic
//! multi-target datasets ([`prior`]), the transformer itself ([`model`]),
//! the prior-fitting loop ([`train`]), in-context inference with
//! permutation ensembling ([`infer`]), real-dataset ingestion ([`data`]),
//! metric and significance machinery ([`eval`]), and the compute-scaling
//! study ([`flops`], [`scaling`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod infer;
pub mod model;
pub mod prior;
pub mod rng;
pub mod scaling;
pub mod storage;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod workers;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParameters, TaskPredictions};
pub use prior::{PriorConfig, SyntheticDataset};
pub use tensor::Tensor;
