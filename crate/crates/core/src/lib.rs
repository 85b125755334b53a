//! Scene-graph relation classification at desk scale.
//!
//! Two residual graph-convolution branches refine a synthetic scene: an
//! object-level branch with gated cross-attention and multi-head contextual
//! coefficients, and a relation-level branch that aggregates context between
//! relation nodes under a co-occurrence prior counted once per image. Branch
//! logits are fused by softmax of their sum, triplets are ranked by
//! confidence products, and recall / mean-recall report how the tail of a
//! long-tailed predicate distribution fares.
//!
//! Start with the runnable examples (`cargo run --example <name>`) or the
//! `scenegcn` binary for the file-based workflow.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod object_resgcn;
pub mod prior;
pub mod relation_resgcn;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
