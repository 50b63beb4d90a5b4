//! Deterministic decoder-only transformer runtime.
//!
//! One fixed architecture family: pre-norm, RMSNorm, rotary position
//! embeddings, gated SiLU MLP, grouped-query attention, no biases, untied
//! unembedding. All computation is 32-bit float with fixed sequential
//! reduction order, so repeated runs are bit-identical and the split
//! forward (upstream then late stack) reproduces the unsplit forward
//! exactly: both paths push each position through the same per-block code.
//!
//! The checkpoint file format is a binary container with a JSON header and a
//! packed f32 payload; see [`checkpoint`]. Synthetic paired checkpoints for
//! the whole pipeline come from [`gen_toy_pair`].

mod checkpoint;
mod forward;
mod tokenizer;
mod toy;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, LayerWeights, Mat, PairedCheckpoints, Weights,
};
pub use forward::{
    argmax, forward_full, forward_late, forward_late_hooked, forward_late_mixed, forward_mixed,
    forward_upstream, greedy_rollout, readout, readout_position, BlockSpec, DecodeState, MlpHook,
    ModelDecoder, ResidualStates, StateSource,
};
pub use tokenizer::{
    decode, encode, token_class, toy_real_token_mask, toy_vocab, TokenClass, TOY_VOCAB_SIZE,
};
pub use toy::{
    gen_toy_manifest, gen_toy_pair, interpolate_checkpoints, ToyMode, ToyPairSpec, TARGET_TOKEN,
    TRIGGER_TOKEN,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture description for one checkpoint.
///
/// `late_boundary` is the first layer of the late stack; when unset in a file
/// header it defaults to round-half-up of 0.6 x `n_layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelConfig", into = "RawModelConfig")]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub late_boundary: usize,
}

impl ModelConfig {
    /// Round-half-up of 0.6 x depth, clamped inside (0, n_layers).
    pub fn default_late_boundary(n_layers: usize) -> usize {
        let b = (6 * n_layers + 5) / 10;
        b.clamp(1, n_layers.saturating_sub(1).max(1))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size < 2 {
            return Err(Error::InvalidConfig(
                "n_layers, d_model, d_ff must be positive and vocab_size >= 2".into(),
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.late_boundary == 0 || self.late_boundary >= self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "late_boundary {} must satisfy 0 < b < n_layers {}",
                self.late_boundary, self.n_layers
            )));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig(
                "rope_theta and norm_eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawModelConfig {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    n_kv_heads: usize,
    d_ff: usize,
    vocab_size: usize,
    rope_theta: f32,
    #[serde(default = "default_norm_eps")]
    norm_eps: f32,
    #[serde(default)]
    late_boundary: Option<usize>,
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl TryFrom<RawModelConfig> for ModelConfig {
    type Error = Error;
    fn try_from(raw: RawModelConfig) -> Result<Self> {
        let cfg = ModelConfig {
            n_layers: raw.n_layers,
            d_model: raw.d_model,
            n_heads: raw.n_heads,
            n_kv_heads: raw.n_kv_heads,
            d_ff: raw.d_ff,
            vocab_size: raw.vocab_size,
            rope_theta: raw.rope_theta,
            norm_eps: raw.norm_eps,
            late_boundary: raw
                .late_boundary
                .unwrap_or_else(|| ModelConfig::default_late_boundary(raw.n_layers)),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ModelConfig> for RawModelConfig {
    fn from(cfg: ModelConfig) -> Self {
        RawModelConfig {
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_kv_heads: cfg.n_kv_heads,
            d_ff: cfg.d_ff,
            vocab_size: cfg.vocab_size,
            rope_theta: cfg.rope_theta,
            norm_eps: cfg.norm_eps,
            late_boundary: Some(cfg.late_boundary),
        }
    }
}
