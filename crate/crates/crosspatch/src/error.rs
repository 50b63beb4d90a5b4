//! Crate-wide error type.
//!
//! Per-prompt and per-event problems during collection are *not* errors; they
//! go into exclusion logs so one bad record never aborts a run. The variants
//! here are the fatal ones: malformed files, shape mismatches, and contract
//! violations between pipeline stages.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("payload truncated: need {needed} bytes, have {have}")]
    TruncatedPayload { needed: usize, have: usize },

    #[error("vocab/real-token mask invalid: {0}")]
    VocabMaskInvalid(String),

    #[error("token id {token} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("boundary {boundary} out of range for {n_layers} layers")]
    BoundaryOutOfRange { boundary: usize, n_layers: usize },

    #[error("states produced at layer {produced_at}, expected boundary {expected}")]
    BoundaryMismatch { produced_at: usize, expected: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid toy-pair spec: {0}")]
    InvalidSpec(String),

    #[error("checkpoint pair mismatch: {0}")]
    PairMismatch(String),

    #[error("interpolation alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),

    #[error("substitution window [{start}, {end}) out of range for {n_layers} layers")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        n_layers: usize,
    },

    #[error("handoff window [{start}, {end}) overlaps layer set starting at {layer_set_start}")]
    WindowOverlapsLayerSet {
        start: usize,
        end: usize,
        layer_set_start: usize,
    },

    #[error("activation dumps misaligned: {0}")]
    DumpMisaligned(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("requested rank {requested} exceeds fitted rank {fitted}")]
    RankExceedsFit { requested: usize, fitted: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no results to report: {0}")]
    NoResults(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("stage dependency unmet: {stage} requires {requires}")]
    StageDependencyUnmet { stage: String, requires: String },

    #[error("malformed manifest line {line}: {message}")]
    MalformedManifest { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
