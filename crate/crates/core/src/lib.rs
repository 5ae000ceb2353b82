//! Multi-grained relation contrastive pre-training for few-shot
//! classification, at desk scale.
//!
//! The pipeline runs bottom-up through the modules: a small reverse-mode
//! [`tensor_core`], a procedural [`dataset`], the fixed [`augment`] family,
//! the micro-CNN [`model`], the [`losses`] with their [`memory_bank`], the
//! SGD [`trainer`], and frozen-feature [`fewshot`] evaluation.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod rng;
pub mod tensor_core;

pub use error::{Error, Result};
pub mod augment;
pub mod dataset;
pub mod fewshot;
pub mod gradient_suite;
pub mod losses;
pub mod memory_bank;
pub mod model;
pub mod trainer;
