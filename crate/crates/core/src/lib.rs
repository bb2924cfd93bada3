//! Token-level mixture of LoRA experts (MoLoRA) on a frozen LLaMA-style
//! toy decoder.

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod analytics;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
