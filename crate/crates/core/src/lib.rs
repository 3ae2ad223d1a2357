//! Surgical workflow video-language pipeline: stage-1 video-language model, temporal segmentation, metrics and corpus tooling.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod lora;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod temporal;
pub mod tensor;
pub mod timeline;
pub mod vlm;

pub use error::{Error, Result};
