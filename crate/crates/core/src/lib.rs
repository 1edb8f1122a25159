//! Masked-token motion generation with inference-time spatial control.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod editctl;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod maskmodel;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod workflow;

pub use error::{Error, Result};
