//! First-divergence cross-patching for paired transformer checkpoints.
//!
//! Given a pretrained (PT) checkpoint and a post-trained (IT) descendant that
//! share a vocabulary, this crate finds the first generated token where the two
//! checkpoints disagree, then crosses each model's upstream residual state with
//! each model's late layer stack and scores the divergent-token margin in all
//! four cells. The difference-in-differences separates the part of the late-stack
//! effect that transfers to the other checkpoint's upstream state from the part
//! that only appears over the model's own upstream state.
//!
//! Everything runs on small synthetic checkpoints generated by
//! [`runtime::gen_toy_pair`], so every quantity in the pipeline is checkable:
//! diagonal hybrid cells reproduce the unsplit forward bit-exactly, structural
//! null pairs give exactly-zero interactions, and the planted `gated_coupling`
//! mode produces a positive interaction by construction.
//!
//! Module map:
//!
//! - [`runtime`] — deterministic f32 decoder-only transformer, checkpoint
//!   container format, split forward passes, toy pair generator
//! - [`collect`] — first-divergence / random-disagreement / native-history
//!   event collection from paired greedy rollouts
//! - [`factorial`] — the four-cell factorial, scale conversions, window
//!   substitution, fixed-support stage sweeps
//! - [`controls`] — interpolation sweep, signed-permutation null, pre-late
//!   commitment filter
//! - [`bridges`] — constrained-continuation sequence margins and forced-token
//!   suffix-only scoring
//! - [`crosscoder`] — paired BatchTopK sparse dictionary on final MLP outputs,
//!   quality gate, causal ranking, mediation / gating / rescue / dose edits
//! - [`geometry`] — boundary-state PCA and rank-k closure tests
//! - [`stats`] — cluster bootstrap, family-balanced aggregation, permutation
//!   nulls
//! - [`pipeline`] + [`report`] — run orchestration and table emission

pub mod bridges;
pub mod collect;
pub mod container;
pub mod controls;
pub mod crosscoder;
pub mod error;
pub mod factorial;
pub mod geometry;
pub mod pipeline;
pub mod report;
pub mod runtime;
pub mod stats;

pub use error::{Error, Result};

/// Toolkit version recorded in every emitted artifact header.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
