//! Domain-generalized identity embeddings: an adversarial auto-encoder over
//! a normalization-equipped backbone, aligned across source domains with a
//! multi-kernel MMD penalty and evaluated by retrieval on an unseen domain.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mmd;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
