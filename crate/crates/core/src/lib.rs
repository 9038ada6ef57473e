//! Numerical core for exogenous tree-gated deep ensembles.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: `f64` tensors, a define-by-run
//!   reverse-mode tape, and a central-difference gradient checker.
//! - [`nn`]: convolution, pooling, batch norm and dense layers, assembled into
//!   the representation network and MLP heads.
//! - [`tree`]: the soft decision-tree gate producing mixture weights.
//! - [`model`]: weak-classifier committees and the architecture variants.
//! - [`loss`]: cross-entropy, the absolute-cosine dispelling loss and their sum.
//! - [`data`]: MNIST IDX ingestion, rotation/scale augmentation and the
//!   procedural sprite generator.
//! - [`train`]: Adam, checkpoints, exogenous pretraining, joint training and
//!   evaluation.

pub mod battery;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, TapeGraph};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
