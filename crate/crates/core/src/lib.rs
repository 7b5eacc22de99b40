//! Training-free model merging with importance-selected task vectors.
//!
//! A task vector is the difference between a fine-tuned model and its
//! pretrained base. This crate scores every parameter of each fine-tuned
//! model by loss sensitivity (`|theta * dL/dtheta|` summed over a few
//! samples), normalizes the scores per layer, and keeps only the entries of
//! each task vector that beat an interpolated quantile threshold. The
//! filtered vectors are then summed onto the base (fusion, coefficient 1) or
//! subtracted from a model (forgetting).
//!
//! Baselines (weight averaging, task arithmetic, TIES, DARE), a `.tnsr`
//! container format and a small synthetic training harness are included.

pub mod cli;
pub mod error;
pub mod importance;
pub mod mask;
pub mod merge;
pub mod store;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use importance::{ImportanceMap, Metric};
pub use mask::{MaskMode, MaskSet, ThresholdMap};
pub use merge::{MergeConfig, TaskVector};
pub use store::{Kind, Meta};
pub use tensor::{BinaryOp, DType, ParamSet, Tensor};
