//! Task-conditioned one-shot generation of small autoregressive
//! transformers from a large source model.
//!
//! A large "source" decoder-only transformer is mapped to a smaller
//! task-specific model by sparse diagonal projection matrices whose
//! diagonals are produced from a task vector by shallow MLPs. The crate
//! contains the full desk-scale stack: a reverse-mode autodiff core with a
//! finite-difference oracle, the transformer, the projection machinery and
//! its reference generators, a procedural textured-digit dataset with a
//! color-cluster tokenizer, the joint training objective, and an
//! experiment harness.
//!
//! Start with the runnable examples (`cargo run --release --example ...`);
//! each one exercises a single capability end to end.

pub mod autodiff;
pub mod container;
pub mod dataset;
pub mod error;
pub mod generators;
pub mod harness;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
