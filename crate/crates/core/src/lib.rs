//! Personalised meta-learning for few-shot human activity recognition.
//!
//! The crate provides:
//!
//! - a small reverse-mode autodiff engine over dense `f64` tensors
//!   ([`graph`], [`tensor`], [`params`], [`optim`]), verified against
//!   finite differences ([`gradcheck`]);
//! - sensor ingestion, windowing and feature transforms, plus a
//!   person-structured synthetic generator ([`datasets`]);
//! - episodic task sampling in personalised, person-aware and
//!   conventional regimes ([`episodes`]);
//! - first-order MAML ([`maml`]), relation networks ([`relation`]) and
//!   a cosine-matching baseline ([`matcher`]);
//! - leave-one-person-out evaluation, Wilcoxon significance testing,
//!   hyper-parameter sweeps, adaptation curves and latency measurement
//!   ([`eval`]).

pub mod datasets;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod maml;
pub mod matcher;
pub mod models;
pub mod optim;
pub mod params;
pub mod relation;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use params::ParamSet;
pub use tensor::Tensor;
