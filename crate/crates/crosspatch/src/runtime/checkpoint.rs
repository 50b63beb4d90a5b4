//! Checkpoint weights and the `XPCK0001` file format.
//!
//! A checkpoint file is the shared binary container (magic, u64 header
//! length, JSON header, f32 payload) with a header holding the model config,
//! a tensor table of `(name, shape, offset)` entries, the vocab strings, and
//! the real-token mask. Tensor names follow the scheme
//! `embed`, `layers.{i}.attn.{wq,wk,wv,wo}`, `layers.{i}.{norm_attn,norm_mlp}`,
//! `layers.{i}.mlp.{w_gate,w_up,w_down}`, `final_norm`, `lm_head`.
//!
//! Checkpoints are immutable after load and shared by reference across
//! analysis phases; every forward pass keeps its own scratch state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

use super::ModelConfig;

/// Row-major f32 matrix. `y = x @ W` maps a length-`rows` input to a
/// length-`cols` output with a fixed inner reduction order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = x @ self`, sequential over the input index.
    pub fn vecmat(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = self.row(i);
            for (o, &w) in out.iter_mut().zip(row.iter()) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub norm_attn: Vec<f32>,
    pub norm_mlp: Vec<f32>,
    pub w_gate: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Mat,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Mat,
}

/// One model: weights, architecture config, vocab, real-token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Weights,
    pub vocab: Vec<String>,
    pub real_token_mask: Vec<bool>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.vocab.len() != self.config.vocab_size {
            return Err(Error::VocabMaskInvalid(format!(
                "vocab has {} entries, config says {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        if self.real_token_mask.len() != self.config.vocab_size {
            return Err(Error::VocabMaskInvalid(format!(
                "real_token_mask has {} entries, config says {}",
                self.real_token_mask.len(),
                self.config.vocab_size
            )));
        }
        if self.real_token_mask.iter().filter(|&&m| m).count() < 2 {
            return Err(Error::VocabMaskInvalid(
                "real_token_mask needs at least 2 true entries".into(),
            ));
        }
        for (name, shape, expected) in self.tensor_specs() {
            if shape != expected {
                return Err(Error::ShapeMismatch {
                    name,
                    expected,
                    found: shape,
                });
            }
        }
        Ok(())
    }

    /// Content hash of the canonical serialized form.
    pub fn content_hash(&self) -> String {
        container::sha256_hex(&checkpoint_bytes(self))
    }

    /// `(name, actual shape, expected shape)` for every tensor, in file order.
    fn tensor_specs(&self) -> Vec<(String, Vec<usize>, Vec<usize>)> {
        let c = &self.config;
        let (d, kv, ff, v) = (c.d_model, c.kv_dim(), c.d_ff, c.vocab_size);
        let mut specs = vec![(
            "embed".to_string(),
            vec![self.weights.embed.rows, self.weights.embed.cols],
            vec![v, d],
        )];
        for (i, l) in self.weights.layers.iter().enumerate() {
            let mat = |m: &Mat| vec![m.rows, m.cols];
            specs.push((format!("layers.{i}.attn.wq"), mat(&l.wq), vec![d, d]));
            specs.push((format!("layers.{i}.attn.wk"), mat(&l.wk), vec![d, kv]));
            specs.push((format!("layers.{i}.attn.wv"), mat(&l.wv), vec![d, kv]));
            specs.push((format!("layers.{i}.attn.wo"), mat(&l.wo), vec![d, d]));
            specs.push((
                format!("layers.{i}.norm_attn"),
                vec![l.norm_attn.len()],
                vec![d],
            ));
            specs.push((
                format!("layers.{i}.norm_mlp"),
                vec![l.norm_mlp.len()],
                vec![d],
            ));
            specs.push((format!("layers.{i}.mlp.w_gate"), mat(&l.w_gate), vec![d, ff]));
            specs.push((format!("layers.{i}.mlp.w_up"), mat(&l.w_up), vec![d, ff]));
            specs.push((format!("layers.{i}.mlp.w_down"), mat(&l.w_down), vec![ff, d]));
        }
        specs.push((
            "final_norm".to_string(),
            vec![self.weights.final_norm.len()],
            vec![d],
        ));
        specs.push((
            "lm_head".to_string(),
            vec![self.weights.lm_head.rows, self.weights.lm_head.cols],
            vec![d, v],
        ));
        specs
    }
}

/// Two checkpoints with identical vocab, mask, and config (weights aside).
#[derive(Debug, Clone)]
pub struct PairedCheckpoints {
    pub pt: Checkpoint,
    pub it: Checkpoint,
}

impl PairedCheckpoints {
    /// Shared-tokenization validation; required before any patching.
    pub fn new(pt: Checkpoint, it: Checkpoint) -> Result<Self> {
        pt.validate()?;
        it.validate()?;
        if pt.config != it.config {
            return Err(Error::PairMismatch("model configs differ".into()));
        }
        if pt.vocab != it.vocab {
            return Err(Error::PairMismatch("vocab lists differ".into()));
        }
        if pt.real_token_mask != it.real_token_mask {
            return Err(Error::PairMismatch("real_token_masks differ".into()));
        }
        Ok(PairedCheckpoints { pt, it })
    }

    pub fn boundary(&self) -> usize {
        self.pt.config.late_boundary
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into the f32 payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    vocab: Vec<String>,
    real_token_mask: Vec<bool>,
}

fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32], payload: &mut Vec<f32>| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
        });
        payload.extend_from_slice(data);
    };
    let w = &ckpt.weights;
    push(
        "embed".into(),
        vec![w.embed.rows, w.embed.cols],
        &w.embed.data,
        &mut payload,
    );
    for (i, l) in w.layers.iter().enumerate() {
        push(
            format!("layers.{i}.attn.wq"),
            vec![l.wq.rows, l.wq.cols],
            &l.wq.data,
            &mut payload,
        );
        push(
            format!("layers.{i}.attn.wk"),
            vec![l.wk.rows, l.wk.cols],
            &l.wk.data,
            &mut payload,
        );
        push(
            format!("layers.{i}.attn.wv"),
            vec![l.wv.rows, l.wv.cols],
            &l.wv.data,
            &mut payload,
        );
        push(
            format!("layers.{i}.attn.wo"),
            vec![l.wo.rows, l.wo.cols],
            &l.wo.data,
            &mut payload,
        );
        push(
            format!("layers.{i}.norm_attn"),
            vec![l.norm_attn.len()],
            &l.norm_attn,
            &mut payload,
        );
        push(
            format!("layers.{i}.norm_mlp"),
            vec![l.norm_mlp.len()],
            &l.norm_mlp,
            &mut payload,
        );
        push(
            format!("layers.{i}.mlp.w_gate"),
            vec![l.w_gate.rows, l.w_gate.cols],
            &l.w_gate.data,
            &mut payload,
        );
        push(
            format!("layers.{i}.mlp.w_up"),
            vec![l.w_up.rows, l.w_up.cols],
            &l.w_up.data,
            &mut payload,
        );
        push(
            format!("layers.{i}.mlp.w_down"),
            vec![l.w_down.rows, l.w_down.cols],
            &l.w_down.data,
            &mut payload,
        );
    }
    push(
        "final_norm".into(),
        vec![w.final_norm.len()],
        &w.final_norm,
        &mut payload,
    );
    push(
        "lm_head".into(),
        vec![w.lm_head.rows, w.lm_head.cols],
        &w.lm_head.data,
        &mut payload,
    );

    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        tensors,
        vocab: ckpt.vocab.clone(),
        real_token_mask: ckpt.real_token_mask.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization");
    container::to_bytes(container::CHECKPOINT_MAGIC, &header_json, &payload)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    std::fs::write(path, checkpoint_bytes(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header_bytes, payload) = container::read_file(path, container::CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let cfg = header.config;
    cfg.validate()?;

    let take = |name: &str, expected: &[usize]| -> Result<Vec<f32>> {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: vec![],
            })?;
        if entry.shape != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: entry.shape.clone(),
            });
        }
        let len: usize = expected.iter().product();
        let end = entry.offset.checked_add(len).ok_or(Error::TruncatedPayload {
            needed: usize::MAX,
            have: payload.len(),
        })?;
        if end > payload.len() {
            return Err(Error::TruncatedPayload {
                needed: end * 4,
                have: payload.len() * 4,
            });
        }
        Ok(payload[entry.offset..end].to_vec())
    };
    let mat = |name: &str, rows: usize, cols: usize| -> Result<Mat> {
        Ok(Mat {
            rows,
            cols,
            data: take(name, &[rows, cols])?,
        })
    };

    let (d, kv, ff, v) = (cfg.d_model, cfg.kv_dim(), cfg.d_ff, cfg.vocab_size);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerWeights {
            wq: mat(&format!("layers.{i}.attn.wq"), d, d)?,
            wk: mat(&format!("layers.{i}.attn.wk"), d, kv)?,
            wv: mat(&format!("layers.{i}.attn.wv"), d, kv)?,
            wo: mat(&format!("layers.{i}.attn.wo"), d, d)?,
            norm_attn: take(&format!("layers.{i}.norm_attn"), &[d])?,
            norm_mlp: take(&format!("layers.{i}.norm_mlp"), &[d])?,
            w_gate: mat(&format!("layers.{i}.mlp.w_gate"), d, ff)?,
            w_up: mat(&format!("layers.{i}.mlp.w_up"), d, ff)?,
            w_down: mat(&format!("layers.{i}.mlp.w_down"), ff, d)?,
        });
    }
    let ckpt = Checkpoint {
        weights: Weights {
            embed: mat("embed", v, d)?,
            layers,
            final_norm: take("final_norm", &[d])?,
            lm_head: mat("lm_head", d, v)?,
        },
        config: cfg,
        vocab: header.vocab,
        real_token_mask: header.real_token_mask,
    };
    ckpt.validate()?;
    Ok(ckpt)
}
