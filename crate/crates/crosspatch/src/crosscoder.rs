//! Paired BatchTopK crosscoder on final MLP outputs, plus the causal feature
//! toolkit built on it.
//!
//! The crosscoder is a shallow sparse autoencoder over *paired* activations:
//! one encoder reads the concatenation of the PT and IT MLP outputs at the
//! same (layer, position), and two decoders reconstruct each branch from a
//! shared sparse code. Sparsity is BatchTopK — for a batch of B tokens,
//! exactly B·k activations survive a global top-B·k selection by value — and
//! at evaluation time the selection is replaced by a frozen per-feature
//! threshold (the minimum value that feature needed to be selected during the
//! last training epoch), so analysis runs are deterministic and batch-free.
//!
//! On top of a trained model: a quality gate, causal feature ranking by
//! held-out margin drop, mediation drops, an upstream-dependent causal gate,
//! feature rescue into the weak hybrid, handoff mediation across a layer
//! window, and bucket dose-response edits. All feature edits touch only the
//! two cells that run the IT late stack, and only at the event position; a
//! pass edited with an empty feature set is bit-identical to the unedited
//! pass because the hook performs no arithmetic.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::collect::DivergenceEvent;
use crate::container::{self, CROSSCODER_MAGIC};
use crate::error::{Error, Result};
use crate::factorial::{Readout, Side};
use crate::runtime::{
    forward_late_hooked, forward_mixed, forward_upstream, readout_position, BlockSpec, Checkpoint,
    Mat, PairedCheckpoints,
};
use crate::stats::draw_rng;

/// Paired activation dumps: one row per (event, position), both branches
/// aligned.
#[derive(Debug, Clone)]
pub struct PairedDumps {
    pub layer_set: Vec<usize>,
    pub d_in: usize,
    pub n_rows: usize,
    /// Row-major `n_rows x d_in`.
    pub pt: Vec<f32>,
    pub it: Vec<f32>,
}

impl PairedDumps {
    pub fn pt_row(&self, r: usize) -> &[f32] {
        &self.pt[r * self.d_in..(r + 1) * self.d_in]
    }

    pub fn it_row(&self, r: usize) -> &[f32] {
        &self.it[r * self.d_in..(r + 1) * self.d_in]
    }

    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.n_rows == 0 {
            return Err(Error::EmptyInput("activation dumps".into()));
        }
        if self.pt.len() != self.n_rows * self.d_in || self.it.len() != self.pt.len() {
            return Err(Error::DumpMisaligned(format!(
                "expected 2 x {} x {} values, found {} PT and {} IT",
                self.n_rows,
                self.d_in,
                self.pt.len(),
                self.it.len()
            )));
        }
        Ok(())
    }
}

/// MLP outputs of `model` at `layer` for every position of `tokens`.
fn native_mlp_dump(model: &Checkpoint, tokens: &[u32], layer: usize) -> Result<Vec<Vec<f32>>> {
    let blocks: Vec<BlockSpec> = model
        .weights
        .layers
        .iter()
        .enumerate()
        .map(|(l, w)| BlockSpec::from_layer(l, w))
        .collect();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(tokens.len());
    let mut hook = |l: usize, _pos: usize, out: &mut [f32]| {
        if l == layer {
            rows.push(out.to_vec());
        }
    };
    forward_mixed(model, blocks, tokens, Some(&mut hook))?;
    if rows.len() != tokens.len() {
        return Err(Error::DumpMisaligned(format!(
            "captured {} rows for {} positions",
            rows.len(),
            tokens.len()
        )));
    }
    Ok(rows)
}

/// Dump paired native PT/IT MLP outputs over all prefix positions of the
/// given events.
pub fn collect_paired_dumps(
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    layer: usize,
) -> Result<PairedDumps> {
    if layer >= pair.pt.config.n_layers {
        return Err(Error::BoundaryOutOfRange {
            boundary: layer,
            n_layers: pair.pt.config.n_layers,
        });
    }
    let d = pair.pt.config.d_model;
    let mut dumps = PairedDumps {
        layer_set: vec![layer],
        d_in: d,
        n_rows: 0,
        pt: Vec::new(),
        it: Vec::new(),
    };
    for ev in events {
        let pt_rows = native_mlp_dump(&pair.pt, &ev.prefix_token_ids, layer)?;
        let it_rows = native_mlp_dump(&pair.it, &ev.prefix_token_ids, layer)?;
        for (p, i) in pt_rows.iter().zip(&it_rows) {
            dumps.pt.extend_from_slice(p);
            dumps.it.extend_from_slice(i);
            dumps.n_rows += 1;
        }
    }
    dumps.validate()?;
    Ok(dumps)
}

/// The paired sparse autoencoder. Decoder "columns" in the unit-norm
/// invariant are per-feature directions: the concatenation of a feature's PT
/// and IT decoder rows is kept at unit norm after every training step.
#[derive(Debug, Clone)]
pub struct CrosscoderModel {
    pub layer_set: Vec<usize>,
    pub d_in: usize,
    pub n_features: usize,
    pub k: usize,
    /// `2*d_in x n_features`.
    pub w_enc: Mat,
    pub b_enc: Vec<f32>,
    /// `n_features x d_in` each.
    pub dec_pt: Mat,
    pub dec_it: Mat,
    pub b_dec_pt: Vec<f32>,
    pub b_dec_it: Vec<f32>,
    /// Frozen eval-time activation threshold per feature; `+inf` marks a
    /// feature never selected during the last training epoch.
    pub eval_threshold: Vec<f32>,
}

impl CrosscoderModel {
    /// Random tied-transpose initialization with unit combined decoder rows.
    pub fn random(layer: usize, d_in: usize, n_features: usize, k: usize, seed: u64) -> Self {
        let mut rng = draw_rng(seed, 0);
        let mut w_enc = Mat::zeros(2 * d_in, n_features);
        let scale = 1.0 / (2.0 * d_in as f32).sqrt();
        for v in w_enc.data.iter_mut() {
            // Box-Muller on uniform draws.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32 * scale;
        }
        let mut model = CrosscoderModel {
            layer_set: vec![layer],
            d_in,
            n_features,
            k,
            w_enc,
            b_enc: vec![0.0; n_features],
            dec_pt: Mat::zeros(n_features, d_in),
            dec_it: Mat::zeros(n_features, d_in),
            b_dec_pt: vec![0.0; d_in],
            b_dec_it: vec![0.0; d_in],
            eval_threshold: vec![0.0; n_features],
        };
        for j in 0..n_features {
            for i in 0..d_in {
                model.dec_pt.data[j * d_in + i] = model.w_enc.data[i * n_features + j];
                model.dec_it.data[j * d_in + i] = model.w_enc.data[(d_in + i) * n_features + j];
            }
        }
        model.normalize_decoder();
        model
    }

    /// Identity initialization: `2*d_in` features, one per input coordinate.
    pub fn identity(layer: usize, d_in: usize) -> Self {
        let n_features = 2 * d_in;
        let mut model = CrosscoderModel {
            layer_set: vec![layer],
            d_in,
            n_features,
            k: d_in,
            w_enc: Mat::zeros(2 * d_in, n_features),
            b_enc: vec![0.0; n_features],
            dec_pt: Mat::zeros(n_features, d_in),
            dec_it: Mat::zeros(n_features, d_in),
            b_dec_pt: vec![0.0; d_in],
            b_dec_it: vec![0.0; d_in],
            eval_threshold: vec![0.0; n_features],
        };
        for i in 0..2 * d_in {
            model.w_enc.data[i * n_features + i] = 1.0;
        }
        for i in 0..d_in {
            model.dec_pt.data[i * d_in + i] = 1.0;
            model.dec_it.data[(d_in + i) * d_in + i] = 1.0;
        }
        model
    }

    /// Unit-normalize each feature's concatenated (PT, IT) decoder vector.
    pub fn normalize_decoder(&mut self) {
        for j in 0..self.n_features {
            let mut ss = 0.0f64;
            for i in 0..self.d_in {
                ss += (self.dec_pt.data[j * self.d_in + i] as f64).powi(2);
                ss += (self.dec_it.data[j * self.d_in + i] as f64).powi(2);
            }
            let norm = ss.sqrt() as f32;
            if norm > 0.0 {
                for i in 0..self.d_in {
                    self.dec_pt.data[j * self.d_in + i] /= norm;
                    self.dec_it.data[j * self.d_in + i] /= norm;
                }
            }
        }
    }

    /// ReLU encoder pre-codes for one paired row.
    pub fn encode_pre(&self, x_pt: &[f32], x_it: &[f32]) -> Vec<f32> {
        let n = self.n_features;
        let mut h = self.b_enc.clone();
        for (i, &x) in x_pt.iter().enumerate() {
            if x != 0.0 {
                let row = &self.w_enc.data[i * n..(i + 1) * n];
                for (hj, &w) in h.iter_mut().zip(row) {
                    *hj += x * w;
                }
            }
        }
        for (i, &x) in x_it.iter().enumerate() {
            if x != 0.0 {
                let row = &self.w_enc.data[(self.d_in + i) * n..(self.d_in + i + 1) * n];
                for (hj, &w) in h.iter_mut().zip(row) {
                    *hj += x * w;
                }
            }
        }
        for hj in h.iter_mut() {
            if *hj < 0.0 {
                *hj = 0.0;
            }
        }
        h
    }

    /// Eval-time feature activations: ReLU codes gated by the frozen
    /// per-feature threshold.
    pub fn eval_acts(&self, x_pt: &[f32], x_it: &[f32]) -> Vec<f32> {
        let mut f = self.encode_pre(x_pt, x_it);
        for (fj, &t) in f.iter_mut().zip(&self.eval_threshold) {
            if !(*fj > 0.0 && *fj >= t) {
                *fj = 0.0;
            }
        }
        f
    }

    /// Decode a sparse code into both branches.
    pub fn decode(&self, f: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let mut x_pt = self.b_dec_pt.clone();
        let mut x_it = self.b_dec_it.clone();
        for (j, &fj) in f.iter().enumerate() {
            if fj != 0.0 {
                let row_pt = self.dec_pt.row(j);
                let row_it = self.dec_it.row(j);
                for i in 0..self.d_in {
                    x_pt[i] += fj * row_pt[i];
                    x_it[i] += fj * row_it[i];
                }
            }
        }
        (x_pt, x_it)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_features: usize,
    pub k: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Row stride of the held-out split: every `holdout_stride`-th row is
    /// held out (disjoint from training by construction).
    pub holdout_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_features: 128,
            k: 8,
            lr: 0.02,
            steps: 2_000,
            batch_size: 32,
            seed: 0,
            holdout_stride: 5,
        }
    }
}

/// Held-out reconstruction metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub ve_pt: f64,
    pub ve_it: f64,
    pub mean_l0: f64,
    pub alive_fraction: f64,
    pub n_rows: usize,
}

/// Flat gradient buffers mirroring the trainable parameters.
pub struct Grads {
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub dec_pt: Vec<f64>,
    pub dec_it: Vec<f64>,
    pub b_dec_pt: Vec<f64>,
    pub b_dec_it: Vec<f64>,
}

impl Grads {
    pub fn zeros(model: &CrosscoderModel) -> Self {
        Grads {
            w_enc: vec![0.0; model.w_enc.data.len()],
            b_enc: vec![0.0; model.n_features],
            dec_pt: vec![0.0; model.dec_pt.data.len()],
            dec_it: vec![0.0; model.dec_it.data.len()],
            b_dec_pt: vec![0.0; model.d_in],
            b_dec_it: vec![0.0; model.d_in],
        }
    }
}

/// Global BatchTopK selection for one batch: encoder pre-codes per row, the
/// active feature set per row after keeping the `B*k` largest positive codes,
/// and the per-feature minimum selected value (for threshold freezing).
pub fn batch_topk_select(
    model: &CrosscoderModel,
    dumps: &PairedDumps,
    rows: &[usize],
) -> (Vec<Vec<f32>>, Vec<Vec<usize>>, Vec<f32>) {
    let b = rows.len();
    let mut codes: Vec<Vec<f32>> = Vec::with_capacity(b);
    for &r in rows {
        codes.push(model.encode_pre(dumps.pt_row(r), dumps.it_row(r)));
    }
    let budget = b * model.k;
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (bi, code) in codes.iter().enumerate() {
        for (j, &v) in code.iter().enumerate() {
            if v > 0.0 {
                order.push((bi, j));
            }
        }
    }
    order.sort_by(|a, b2| {
        codes[b2.0][b2.1]
            .total_cmp(&codes[a.0][a.1])
            .then(a.cmp(b2))
    });
    order.truncate(budget);
    let mut active: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut min_selected = vec![f32::INFINITY; model.n_features];
    for &(bi, j) in &order {
        active[bi].push(j);
        let v = codes[bi][j];
        if v < min_selected[j] {
            min_selected[j] = v;
        }
    }
    (codes, active, min_selected)
}

/// Forward + analytic gradients for one batch under BatchTopK. Returns the
/// loss (mean over rows of the summed two-branch squared error) and the
/// per-feature minimum selected value (for threshold freezing).
pub fn batch_loss_and_grads(
    model: &CrosscoderModel,
    dumps: &PairedDumps,
    rows: &[usize],
    grads: &mut Grads,
) -> (f64, Vec<f32>) {
    let b = rows.len();
    let nf = model.n_features;
    let d = model.d_in;
    let (codes, active, min_selected) = batch_topk_select(model, dumps, rows);

    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0f64;
    for (bi, &r) in rows.iter().enumerate() {
        let x_pt = dumps.pt_row(r);
        let x_it = dumps.it_row(r);
        // Sparse reconstruction.
        let mut rec_pt: Vec<f64> = model.b_dec_pt.iter().map(|&v| v as f64).collect();
        let mut rec_it: Vec<f64> = model.b_dec_it.iter().map(|&v| v as f64).collect();
        for &j in &active[bi] {
            let fj = codes[bi][j] as f64;
            for i in 0..d {
                rec_pt[i] += fj * model.dec_pt.data[j * d + i] as f64;
                rec_it[i] += fj * model.dec_it.data[j * d + i] as f64;
            }
        }
        // Residuals and output gradients.
        let mut g_pt = vec![0.0f64; d];
        let mut g_it = vec![0.0f64; d];
        for i in 0..d {
            let e_pt = rec_pt[i] - x_pt[i] as f64;
            let e_it = rec_it[i] - x_it[i] as f64;
            loss += (e_pt * e_pt + e_it * e_it) * inv_b;
            g_pt[i] = 2.0 * e_pt * inv_b;
            g_it[i] = 2.0 * e_it * inv_b;
            grads.b_dec_pt[i] += g_pt[i];
            grads.b_dec_it[i] += g_it[i];
        }
        // Decoder and (through the code) encoder gradients, straight-through
        // over the fixed active set.
        for &j in &active[bi] {
            let fj = codes[bi][j] as f64;
            let mut g_f = 0.0f64;
            for i in 0..d {
                grads.dec_pt[j * d + i] += fj * g_pt[i];
                grads.dec_it[j * d + i] += fj * g_it[i];
                g_f += model.dec_pt.data[j * d + i] as f64 * g_pt[i];
                g_f += model.dec_it.data[j * d + i] as f64 * g_it[i];
            }
            grads.b_enc[j] += g_f;
            for i in 0..d {
                let xp = x_pt[i] as f64;
                if xp != 0.0 {
                    grads.w_enc[i * nf + j] += xp * g_f;
                }
                let xi = x_it[i] as f64;
                if xi != 0.0 {
                    grads.w_enc[(d + i) * nf + j] += xi * g_f;
                }
            }
        }
    }
    (loss, min_selected)
}

fn sgd_momentum(param: &mut [f32], grad: &[f64], vel: &mut [f64], lr: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = 0.9 * *v - lr * g;
        *p += *v as f32;
    }
}

/// Rows used for training / evaluation under the stride split.
pub fn split_rows(n_rows: usize, stride: usize) -> (Vec<usize>, Vec<usize>) {
    let stride = stride.max(2);
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for r in 0..n_rows {
        if r % stride == 0 {
            holdout.push(r);
        } else {
            train.push(r);
        }
    }
    (train, holdout)
}

/// Held-out metrics under the frozen-threshold eval path.
pub fn eval_metrics(
    model: &CrosscoderModel,
    dumps: &PairedDumps,
    rows: &[usize],
) -> Result<HeldoutMetrics> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("eval_metrics: no held-out rows".into()));
    }
    let d = model.d_in;
    let n = rows.len() as f64;
    let mut mean_pt = vec![0.0f64; d];
    let mut mean_it = vec![0.0f64; d];
    for &r in rows {
        for i in 0..d {
            mean_pt[i] += dumps.pt_row(r)[i] as f64 / n;
            mean_it[i] += dumps.it_row(r)[i] as f64 / n;
        }
    }
    let mut err_pt = 0.0f64;
    let mut err_it = 0.0f64;
    let mut var_pt = 0.0f64;
    let mut var_it = 0.0f64;
    let mut l0_sum = 0.0f64;
    let mut alive = vec![false; model.n_features];
    for &r in rows {
        let x_pt = dumps.pt_row(r);
        let x_it = dumps.it_row(r);
        let f = model.eval_acts(x_pt, x_it);
        for (j, &fj) in f.iter().enumerate() {
            if fj != 0.0 {
                l0_sum += 1.0;
                alive[j] = true;
            }
        }
        let (rec_pt, rec_it) = model.decode(&f);
        for i in 0..d {
            err_pt += (rec_pt[i] as f64 - x_pt[i] as f64).powi(2);
            err_it += (rec_it[i] as f64 - x_it[i] as f64).powi(2);
            var_pt += (x_pt[i] as f64 - mean_pt[i]).powi(2);
            var_it += (x_it[i] as f64 - mean_it[i]).powi(2);
        }
    }
    Ok(HeldoutMetrics {
        ve_pt: 1.0 - err_pt / var_pt.max(f64::MIN_POSITIVE),
        ve_it: 1.0 - err_it / var_it.max(f64::MIN_POSITIVE),
        mean_l0: l0_sum / n,
        alive_fraction: alive.iter().filter(|&&a| a).count() as f64 / model.n_features as f64,
        n_rows: rows.len(),
    })
}

/// Train a paired BatchTopK crosscoder with plain SGD + momentum 0.9 and
/// per-step decoder renormalization. Deterministic for a fixed config.
pub fn train_crosscoder(
    dumps: &PairedDumps,
    cfg: &TrainConfig,
) -> Result<(CrosscoderModel, HeldoutMetrics)> {
    dumps.validate()?;
    if cfg.k == 0 || cfg.n_features == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidSpec(
            "n_features, k, batch_size must be positive".into(),
        ));
    }
    let layer = *dumps.layer_set.first().ok_or_else(|| {
        Error::InvalidSpec("dumps carry no layer_set".into())
    })?;
    let (train, holdout) = split_rows(dumps.n_rows, cfg.holdout_stride);
    if train.len() < cfg.batch_size {
        return Err(Error::EmptyInput(format!(
            "{} training rows < batch size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut model = CrosscoderModel::random(layer, dumps.d_in, cfg.n_features, cfg.k, cfg.seed);
    let mut vel = Grads::zeros(&model);
    let steps_per_epoch = train.len() / cfg.batch_size;
    let mut order = train.clone();
    let mut epoch_min = vec![f32::INFINITY; cfg.n_features];
    for step in 0..cfg.steps {
        let within = step % steps_per_epoch;
        if within == 0 {
            let epoch = step / steps_per_epoch;
            order.shuffle(&mut draw_rng(cfg.seed ^ 0x9e37, epoch as u64));
            epoch_min = vec![f32::INFINITY; cfg.n_features];
        }
        let batch = &order[within * cfg.batch_size..(within + 1) * cfg.batch_size];
        let mut grads = Grads::zeros(&model);
        let (loss, min_selected) = batch_loss_and_grads(&model, dumps, batch, &mut grads);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        for (e, m) in epoch_min.iter_mut().zip(&min_selected) {
            if *m < *e {
                *e = *m;
            }
        }
        sgd_momentum(&mut model.w_enc.data, &grads.w_enc, &mut vel.w_enc, cfg.lr);
        sgd_momentum(&mut model.b_enc, &grads.b_enc, &mut vel.b_enc, cfg.lr);
        sgd_momentum(&mut model.dec_pt.data, &grads.dec_pt, &mut vel.dec_pt, cfg.lr);
        sgd_momentum(&mut model.dec_it.data, &grads.dec_it, &mut vel.dec_it, cfg.lr);
        sgd_momentum(&mut model.b_dec_pt, &grads.b_dec_pt, &mut vel.b_dec_pt, cfg.lr);
        sgd_momentum(&mut model.b_dec_it, &grads.b_dec_it, &mut vel.b_dec_it, cfg.lr);
        model.normalize_decoder();
    }
    model.eval_threshold = epoch_min;
    let metrics = eval_metrics(&model, dumps, &holdout)?;
    Ok((model, metrics))
}

/// Quality gate over held-out metrics and the two causal-drop probes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityGate {
    pub ve_pt: f64,
    pub ve_it: f64,
    pub mean_l0: f64,
    pub alive_fraction: f64,
    pub causal_drop_top200: f64,
    pub random_drop: f64,
    pub passed: bool,
}

pub fn evaluate_gate(
    metrics: &HeldoutMetrics,
    k: usize,
    causal_drop_top200: f64,
    random_drop: f64,
) -> QualityGate {
    let l0_ok = (metrics.mean_l0 - k as f64).abs() / k as f64 <= 0.10;
    let alive_ok = (0.01..=0.20).contains(&metrics.alive_fraction);
    QualityGate {
        ve_pt: metrics.ve_pt,
        ve_it: metrics.ve_it,
        mean_l0: metrics.mean_l0,
        alive_fraction: metrics.alive_fraction,
        causal_drop_top200,
        random_drop,
        passed: metrics.ve_pt >= 0.75
            && metrics.ve_it >= 0.75
            && l0_ok
            && alive_ok
            && causal_drop_top200 > 0.0
            && random_drop <= 0.05,
    }
}

/// How a feature set was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    CausalTopk,
    MatchedRandom,
    TopActiveNoncausal,
    SameDeltaRandom,
    Bucket,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSet {
    pub indices: Vec<usize>,
    pub selection: Selection,
}

impl FeatureSet {
    pub fn new(indices: Vec<usize>, selection: Selection, n_features: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for &i in &indices {
            if i >= n_features {
                return Err(Error::InvalidSpec(format!(
                    "feature index {i} out of range for {n_features} features"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidSpec(format!("duplicate feature index {i}")));
            }
        }
        Ok(FeatureSet { indices, selection })
    }

    pub fn empty(selection: Selection) -> Self {
        FeatureSet {
            indices: Vec::new(),
            selection,
        }
    }
}

/// Size-matched random selection from alive features, excluding a set.
pub fn matched_random_features(
    alive: &[usize],
    exclude: &FeatureSet,
    size: usize,
    n_features: usize,
    seed: u64,
) -> Result<FeatureSet> {
    let excluded: HashSet<usize> = exclude.indices.iter().copied().collect();
    let mut pool: Vec<usize> = alive
        .iter()
        .copied()
        .filter(|i| !excluded.contains(i))
        .collect();
    if pool.len() < size {
        return Err(Error::EmptyInput(format!(
            "matched_random: pool {} smaller than requested {size}",
            pool.len()
        )));
    }
    pool.shuffle(&mut draw_rng(seed, 1));
    pool.truncate(size);
    pool.sort_unstable();
    FeatureSet::new(pool, Selection::MatchedRandom, n_features)
}

/// A feature-space edit applied at the event position inside the IT late
/// stack. Feature activations are computed with the PT slot filled by the
/// PT-native activation at that position and the IT slot by the activation of
/// the pass being edited, so the native (U_IT, L_IT) cell sees exactly its
/// training-time codes.
enum Edit<'a> {
    /// Subtract `alpha` times each feature's IT-branch contribution.
    Scale { set: &'a [usize], alpha: f32 },
    /// Replace each feature's contribution with a target activation level.
    Replace { set: &'a [usize], target: &'a [f32] },
}

/// Margin of one IT-late cell with an optional feature edit applied at the
/// event position. `None` runs the identical hooked code path with no edit,
/// so edited and unedited margins are comparable bit-for-bit.
fn edited_cell_margin(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
    upstream: Side,
    readout: Readout,
    pt_native: &[Vec<f32>],
    edit: Option<&Edit>,
) -> Result<f64> {
    let layer = model.layer_set[0];
    let boundary = pair.boundary();
    if layer < boundary {
        return Err(Error::InvalidSpec(format!(
            "crosscoder layer {layer} below boundary {boundary}: edits must target the late stack"
        )));
    }
    let event_pos = ev.prefix_token_ids.len() - 1;
    let mut hook = |l: usize, pos: usize, out: &mut [f32]| {
        if l != layer || pos != event_pos {
            return;
        }
        let Some(edit) = edit else { return };
        let f = model.eval_acts(&pt_native[pos], out);
        match edit {
            Edit::Scale { set, alpha } => {
                for &j in *set {
                    let fj = f[j];
                    if fj != 0.0 {
                        let row = model.dec_it.row(j);
                        for (o, &w) in out.iter_mut().zip(row) {
                            *o -= alpha * fj * w;
                        }
                    }
                }
            }
            Edit::Replace { set, target } => {
                for &j in *set {
                    let delta = target[j] - f[j];
                    if delta != 0.0 {
                        let row = model.dec_it.row(j);
                        for (o, &w) in out.iter_mut().zip(row) {
                            *o += delta * w;
                        }
                    }
                }
            }
        }
    };
    let states = match upstream {
        Side::It => {
            let blocks: Vec<BlockSpec> = pair
                .it
                .weights
                .layers
                .iter()
                .enumerate()
                .map(|(l, w)| BlockSpec::from_layer(l, w))
                .collect();
            forward_mixed(&pair.it, blocks, &ev.prefix_token_ids, Some(&mut hook))?
        }
        Side::Pt => {
            let up = forward_upstream(&pair.pt, &ev.prefix_token_ids, boundary)?;
            forward_late_hooked(&pair.it, &up, boundary, Some(&mut hook))?
        }
    };
    let reader = readout.reader(pair, Side::It);
    let logits = readout_position(&states, event_pos, reader, true)?;
    Ok(logits[ev.t_it as usize] as f64 - logits[ev.t_pt as usize] as f64)
}

/// PT-native MLP activations at the crosscoder layer for one event.
fn event_pt_native(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
) -> Result<Vec<Vec<f32>>> {
    native_mlp_dump(&pair.pt, &ev.prefix_token_ids, model.layer_set[0])
}

/// Feature activations at the event position of one IT-late cell.
pub fn feature_activations_at(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
    upstream: Side,
) -> Result<Vec<f32>> {
    let layer = model.layer_set[0];
    let boundary = pair.boundary();
    let pt_native = event_pt_native(model, pair, ev)?;
    let event_pos = ev.prefix_token_ids.len() - 1;
    let mut captured = None;
    let mut hook = |l: usize, pos: usize, out: &mut [f32]| {
        if l == layer && pos == event_pos {
            captured = Some(model.eval_acts(&pt_native[pos], out));
        }
    };
    match upstream {
        Side::It => {
            let blocks: Vec<BlockSpec> = pair
                .it
                .weights
                .layers
                .iter()
                .enumerate()
                .map(|(l, w)| BlockSpec::from_layer(l, w))
                .collect();
            forward_mixed(&pair.it, blocks, &ev.prefix_token_ids, Some(&mut hook))?;
        }
        Side::Pt => {
            let up = forward_upstream(&pair.pt, &ev.prefix_token_ids, boundary)?;
            forward_late_hooked(&pair.it, &up, boundary, Some(&mut hook))?;
        }
    }
    captured.ok_or_else(|| Error::DumpMisaligned("event position hook never fired".into()))
}

/// One ranked feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedFeatures {
    /// Descending by score, ties by index.
    pub scores: Vec<FeatureScore>,
    /// Ranking with a failed gate is allowed but flagged.
    pub gate_passed: bool,
}

/// Rank features by mean (U_IT, L_IT) margin drop under single-feature
/// ablation at the event position.
pub fn rank_features_causal(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    readout: Readout,
    gate_passed: bool,
) -> Result<RankedFeatures> {
    if events.is_empty() {
        return Err(Error::EmptyInput("rank_features_causal".into()));
    }
    let mut sums = vec![0.0f64; model.n_features];
    for ev in events {
        let pt_native = event_pt_native(model, pair, ev)?;
        let full = edited_cell_margin(model, pair, ev, Side::It, readout, &pt_native, None)?;
        let acts = feature_activations_at(model, pair, ev, Side::It)?;
        for j in 0..model.n_features {
            // A feature inactive at the event position contributes nothing;
            // its ablated pass is bit-identical and scores exactly zero.
            if acts[j] == 0.0 {
                continue;
            }
            let set = [j];
            let edit = Edit::Scale {
                set: &set,
                alpha: 1.0,
            };
            let ablated =
                edited_cell_margin(model, pair, ev, Side::It, readout, &pt_native, Some(&edit))?;
            sums[j] += full - ablated;
        }
    }
    let n = events.len() as f64;
    let mut scores: Vec<FeatureScore> = sums
        .into_iter()
        .enumerate()
        .map(|(feature, s)| FeatureScore {
            feature,
            score: s / n,
        })
        .collect();
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.feature.cmp(&b.feature)));
    Ok(RankedFeatures {
        scores,
        gate_passed,
    })
}

const DEGENERATE_INTERACTION_EPS: f64 = 1e-6;
/// Finite-denominator filter threshold for fraction reporting.
pub const FRACTION_DENOMINATOR_MIN: f64 = 0.25;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MediationDrop {
    pub i_full: f64,
    pub i_ablate: f64,
    pub drop: f64,
    pub share: Option<f64>,
    pub degenerate_interaction: bool,
    pub n_events: usize,
}

/// The four margins that enter one event's interaction, with the two IT-late
/// cells optionally edited.
fn event_cells(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
    readout: Readout,
    pt_native: &[Vec<f32>],
    edit: Option<&Edit>,
) -> Result<(f64, f64, f64, f64)> {
    use crate::factorial::score_cell;
    let y_pp = score_cell(pair, ev, Side::Pt, Side::Pt, readout)?;
    let y_ip = score_cell(pair, ev, Side::It, Side::Pt, readout)?;
    let y_pi = edited_cell_margin(model, pair, ev, Side::Pt, readout, pt_native, edit)?;
    let y_ii = edited_cell_margin(model, pair, ev, Side::It, readout, pt_native, edit)?;
    Ok((y_pp, y_pi, y_ip, y_ii))
}

/// Interaction drop from removing a feature set's IT-branch contributions in
/// the two IT-late cells only.
pub fn mediation_drop(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    set: &FeatureSet,
    readout: Readout,
) -> Result<MediationDrop> {
    if events.is_empty() {
        return Err(Error::EmptyInput("mediation_drop".into()));
    }
    let mut full_sum = 0.0f64;
    let mut abl_sum = 0.0f64;
    for ev in events {
        let pt_native = event_pt_native(model, pair, ev)?;
        let edit = Edit::Scale {
            set: &set.indices,
            alpha: 1.0,
        };
        let (y_pp, y_pi, y_ip, y_ii) = event_cells(model, pair, ev, readout, &pt_native, None)?;
        let (a_pp, a_pi, a_ip, a_ii) =
            event_cells(model, pair, ev, readout, &pt_native, Some(&edit))?;
        // PT-late cells are untouched by construction.
        debug_assert_eq!(y_pp, a_pp);
        debug_assert_eq!(y_ip, a_ip);
        full_sum += (y_ii - y_ip) - (y_pi - y_pp);
        abl_sum += (a_ii - a_ip) - (a_pi - a_pp);
    }
    let n = events.len() as f64;
    let i_full = full_sum / n;
    let i_ablate = abl_sum / n;
    let degenerate = i_full.abs() < DEGENERATE_INTERACTION_EPS;
    Ok(MediationDrop {
        i_full,
        i_ablate,
        drop: i_full - i_ablate,
        share: (!degenerate).then(|| (i_full - i_ablate) / i_full),
        degenerate_interaction: degenerate,
        n_events: events.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalGate {
    /// Ablation drop in (U_IT, L_IT).
    pub drop_coupled: f64,
    /// Ablation drop in (U_PT, L_IT).
    pub drop_portable: f64,
    /// drop_coupled − drop_portable.
    pub gate: f64,
    pub n_events: usize,
}

/// Upstream-dependent causal gate: how much of the ablation drop needs the
/// IT upstream.
pub fn causal_gate(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    set: &FeatureSet,
    readout: Readout,
) -> Result<CausalGate> {
    if events.is_empty() {
        return Err(Error::EmptyInput("causal_gate".into()));
    }
    let mut coupled = 0.0f64;
    let mut portable = 0.0f64;
    for ev in events {
        let pt_native = event_pt_native(model, pair, ev)?;
        let edit = Edit::Scale {
            set: &set.indices,
            alpha: 1.0,
        };
        let full_ii = edited_cell_margin(model, pair, ev, Side::It, readout, &pt_native, None)?;
        let abl_ii =
            edited_cell_margin(model, pair, ev, Side::It, readout, &pt_native, Some(&edit))?;
        let full_pi = edited_cell_margin(model, pair, ev, Side::Pt, readout, &pt_native, None)?;
        let abl_pi =
            edited_cell_margin(model, pair, ev, Side::Pt, readout, &pt_native, Some(&edit))?;
        coupled += full_ii - abl_ii;
        portable += full_pi - abl_pi;
    }
    let n = events.len() as f64;
    let drop_coupled = coupled / n;
    let drop_portable = portable / n;
    Ok(CausalGate {
        drop_coupled,
        drop_portable,
        gate: drop_coupled - drop_portable,
        n_events: events.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRescue {
    pub rescue_gain: f64,
    /// Mean per-event gain / (y_ii − y_pi) over events passing the
    /// finite-denominator filter.
    pub rescue_fraction: Option<f64>,
    pub n_events: usize,
    pub n_filtered: usize,
}

/// Copy a feature set's native (U_IT, L_IT) activations into the weak
/// (U_PT, L_IT) hybrid, replacing that hybrid's own contributions.
pub fn feature_rescue(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    set: &FeatureSet,
    readout: Readout,
) -> Result<FeatureRescue> {
    if events.is_empty() {
        return Err(Error::EmptyInput("feature_rescue".into()));
    }
    let mut gain_sum = 0.0f64;
    let mut fracs = Vec::new();
    for ev in events {
        let pt_native = event_pt_native(model, pair, ev)?;
        let native_acts = feature_activations_at(model, pair, ev, Side::It)?;
        let y_pi = edited_cell_margin(model, pair, ev, Side::Pt, readout, &pt_native, None)?;
        let y_ii = edited_cell_margin(model, pair, ev, Side::It, readout, &pt_native, None)?;
        let edit = Edit::Replace {
            set: &set.indices,
            target: &native_acts,
        };
        let rescued =
            edited_cell_margin(model, pair, ev, Side::Pt, readout, &pt_native, Some(&edit))?;
        let gain = rescued - y_pi;
        gain_sum += gain;
        let missing = y_ii - y_pi;
        if missing.abs() >= FRACTION_DENOMINATOR_MIN {
            fracs.push(gain / missing);
        }
    }
    let n_filtered = fracs.len();
    Ok(FeatureRescue {
        rescue_gain: gain_sum / events.len() as f64,
        rescue_fraction: (!fracs.is_empty())
            .then(|| fracs.iter().sum::<f64>() / fracs.len() as f64),
        n_events: events.len(),
        n_filtered,
    })
}

/// Direction of a handoff-mediation probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffDirection {
    /// Start from (U_PT, L_IT); replace the window with IT computation.
    Rescue,
    /// Start from (U_IT, L_IT); replace the window with PT computation.
    Degrade,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandoffMediation {
    pub total_effect: f64,
    pub mediated_part: f64,
    /// Mean per-event mediated/total over events passing the filter.
    pub mediated_fraction: Option<f64>,
    pub n_events: usize,
    pub n_filtered: usize,
}

/// Margin with explicit per-layer sides, an embed side, and the feature edit
/// hook.
fn chimera_margin(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
    side_of: impl Fn(usize) -> Side,
    embed: Side,
    readout: Readout,
    pt_native: &[Vec<f32>],
    edit: Option<&Edit>,
) -> Result<f64> {
    let layer = model.layer_set[0];
    let event_pos = ev.prefix_token_ids.len() - 1;
    let blocks: Vec<BlockSpec> = (0..pair.pt.config.n_layers)
        .map(|l| match side_of(l) {
            Side::Pt => BlockSpec::from_layer(l, &pair.pt.weights.layers[l]),
            Side::It => BlockSpec::from_layer(l, &pair.it.weights.layers[l]),
        })
        .collect();
    let embed_model = match embed {
        Side::Pt => &pair.pt,
        Side::It => &pair.it,
    };
    let mut hook = |l: usize, pos: usize, out: &mut [f32]| {
        if l != layer || pos != event_pos {
            return;
        }
        let Some(edit) = edit else { return };
        let f = model.eval_acts(&pt_native[pos], out);
        if let Edit::Scale { set, alpha } = edit {
            for &j in *set {
                let fj = f[j];
                if fj != 0.0 {
                    let row = model.dec_it.row(j);
                    for (o, &w) in out.iter_mut().zip(row) {
                        *o -= alpha * fj * w;
                    }
                }
            }
        }
    };
    let states = forward_mixed(embed_model, blocks, &ev.prefix_token_ids, Some(&mut hook))?;
    let reader = readout.reader(pair, Side::It);
    let logits = readout_position(&states, event_pos, reader, true)?;
    Ok(logits[ev.t_it as usize] as f64 - logits[ev.t_pt as usize] as f64)
}

/// How much of a window handoff's margin effect is mediated by a feature set:
/// the part of the margin change that disappears when the set is ablated in
/// both the base and the perturbed pass.
pub fn handoff_mediation(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    window: std::ops::Range<usize>,
    direction: HandoffDirection,
    set: &FeatureSet,
    readout: Readout,
) -> Result<HandoffMediation> {
    if events.is_empty() {
        return Err(Error::EmptyInput("handoff_mediation".into()));
    }
    let layer_set_start = model.layer_set[0];
    if window.end > layer_set_start || window.start > window.end {
        return Err(Error::WindowOverlapsLayerSet {
            start: window.start,
            end: window.end,
            layer_set_start,
        });
    }
    let boundary = pair.boundary();
    let (base_side, swap_side, embed): (fn(usize, usize) -> Side, Side, Side) = match direction {
        HandoffDirection::Rescue => (
            |l, b| if l < b { Side::Pt } else { Side::It },
            Side::It,
            Side::Pt,
        ),
        HandoffDirection::Degrade => (|_, _| Side::It, Side::Pt, Side::It),
    };
    let mut total_sum = 0.0f64;
    let mut mediated_sum = 0.0f64;
    let mut fracs = Vec::new();
    for ev in events {
        let pt_native = event_pt_native(model, pair, ev)?;
        let edit = Edit::Scale {
            set: &set.indices,
            alpha: 1.0,
        };
        let base_of = |l: usize| base_side(l, boundary);
        let pert_of = |l: usize| {
            if window.contains(&l) {
                swap_side
            } else {
                base_side(l, boundary)
            }
        };
        let base =
            chimera_margin(model, pair, ev, base_of, embed, readout, &pt_native, None)?;
        let pert =
            chimera_margin(model, pair, ev, pert_of, embed, readout, &pt_native, None)?;
        let base_abl =
            chimera_margin(model, pair, ev, base_of, embed, readout, &pt_native, Some(&edit))?;
        let pert_abl =
            chimera_margin(model, pair, ev, pert_of, embed, readout, &pt_native, Some(&edit))?;
        let total = pert - base;
        let mediated = total - (pert_abl - base_abl);
        total_sum += total;
        mediated_sum += mediated;
        if total.abs() >= FRACTION_DENOMINATOR_MIN {
            fracs.push(mediated / total);
        }
    }
    let n = events.len() as f64;
    let n_filtered = fracs.len();
    Ok(HandoffMediation {
        total_effect: total_sum / n,
        mediated_part: mediated_sum / n,
        mediated_fraction: (!fracs.is_empty())
            .then(|| fracs.iter().sum::<f64>() / fracs.len() as f64),
        n_events: events.len(),
        n_filtered,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoseRow {
    pub alpha: f64,
    pub interaction: f64,
    pub drop: f64,
}

/// Default dose grid.
pub const DEFAULT_DOSES: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

/// Scale a bucket's IT-branch contributions by (1 − α) in the two IT-late
/// cells and report the interaction drop per dose.
pub fn bucket_edit_dose_response(
    model: &CrosscoderModel,
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    bucket: &FeatureSet,
    alphas: &[f64],
    readout: Readout,
) -> Result<Vec<DoseRow>> {
    if events.is_empty() {
        return Err(Error::EmptyInput("bucket_edit_dose_response".into()));
    }
    let mut per_alpha = vec![0.0f64; alphas.len()];
    let mut full_sum = 0.0f64;
    for ev in events {
        let pt_native = event_pt_native(model, pair, ev)?;
        let (y_pp, y_pi, y_ip, y_ii) = event_cells(model, pair, ev, readout, &pt_native, None)?;
        full_sum += (y_ii - y_ip) - (y_pi - y_pp);
        for (ai, &alpha) in alphas.iter().enumerate() {
            if alpha == 0.0 {
                // The α = 0 hook performs no arithmetic, so the edited pass
                // is the unedited pass bit-for-bit.
                per_alpha[ai] += (y_ii - y_ip) - (y_pi - y_pp);
                continue;
            }
            let edit = Edit::Scale {
                set: &bucket.indices,
                alpha: alpha as f32,
            };
            let (a_pp, a_pi, a_ip, a_ii) =
                event_cells(model, pair, ev, readout, &pt_native, Some(&edit))?;
            per_alpha[ai] += (a_ii - a_ip) - (a_pi - a_pp);
        }
    }
    let n = events.len() as f64;
    let i_full = full_sum / n;
    Ok(alphas
        .iter()
        .zip(&per_alpha)
        .map(|(&alpha, &sum)| DoseRow {
            alpha,
            interaction: sum / n,
            drop: i_full - sum / n,
        })
        .collect())
}

/// Header fields of the `XCCD0001` container.
#[derive(Debug, Serialize, Deserialize)]
struct CrosscoderHeader {
    layer_set: Vec<usize>,
    d_in: usize,
    n_features: usize,
    k: usize,
}

/// Save a crosscoder in the shared binary container format.
pub fn save_crosscoder(path: &Path, model: &CrosscoderModel) -> Result<()> {
    let header = json!({
        "layer_set": model.layer_set,
        "d_in": model.d_in,
        "n_features": model.n_features,
        "k": model.k,
        "tensors": [
            {"name": "w_enc", "shape": [2 * model.d_in, model.n_features]},
            {"name": "b_enc", "shape": [model.n_features]},
            {"name": "dec_pt", "shape": [model.n_features, model.d_in]},
            {"name": "dec_it", "shape": [model.n_features, model.d_in]},
            {"name": "b_dec_pt", "shape": [model.d_in]},
            {"name": "b_dec_it", "shape": [model.d_in]},
            {"name": "eval_threshold", "shape": [model.n_features]},
        ],
    });
    let mut payload = Vec::new();
    payload.extend_from_slice(&model.w_enc.data);
    payload.extend_from_slice(&model.b_enc);
    payload.extend_from_slice(&model.dec_pt.data);
    payload.extend_from_slice(&model.dec_it.data);
    payload.extend_from_slice(&model.b_dec_pt);
    payload.extend_from_slice(&model.b_dec_it);
    payload.extend_from_slice(&model.eval_threshold);
    container::write_file(
        path,
        CROSSCODER_MAGIC,
        serde_json::to_vec(&header)?.as_slice(),
        &payload,
    )
}

pub fn load_crosscoder(path: &Path) -> Result<CrosscoderModel> {
    let (header_bytes, payload) = container::read_file(path, CROSSCODER_MAGIC)?;
    let header: CrosscoderHeader = serde_json::from_slice(&header_bytes)?;
    let d = header.d_in;
    let nf = header.n_features;
    let expected = 2 * d * nf + nf + 2 * (nf * d) + 2 * d + nf;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            needed: expected,
            have: payload.len(),
        });
    }
    let mut off = 0usize;
    let mut take = |len: usize| {
        let s = payload[off..off + len].to_vec();
        off += len;
        s
    };
    let w_enc = Mat {
        rows: 2 * d,
        cols: nf,
        data: take(2 * d * nf),
    };
    let b_enc = take(nf);
    let dec_pt = Mat {
        rows: nf,
        cols: d,
        data: take(nf * d),
    };
    let dec_it = Mat {
        rows: nf,
        cols: d,
        data: take(nf * d),
    };
    let b_dec_pt = take(d);
    let b_dec_it = take(d);
    let eval_threshold = take(nf);
    Ok(CrosscoderModel {
        layer_set: header.layer_set,
        d_in: d,
        n_features: nf,
        k: header.k,
        w_enc,
        b_enc,
        dec_pt,
        dec_it,
        b_dec_pt,
        b_dec_it,
        eval_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::collect_first_divergences;
    use crate::factorial::score_cell;
    use crate::runtime::{
        gen_toy_manifest, gen_toy_pair, ModelConfig, ToyMode, ToyPairSpec, TOY_VOCAB_SIZE,
    };

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 6,
            d_model: 64,
            n_heads: 8,
            n_kv_heads: 4,
            d_ff: 128,
            vocab_size: TOY_VOCAB_SIZE,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            late_boundary: 4,
        }
    }

    fn gated_events(n: usize) -> (PairedCheckpoints, Vec<DivergenceEvent>) {
        let p = gen_toy_pair(&ToyPairSpec {
            mode: ToyMode::GatedCoupling,
            config: cfg(),
            seed: 7,
        })
        .unwrap();
        let manifest = gen_toy_manifest(n, 7, true);
        let c = collect_first_divergences(&p, &manifest, 48).unwrap();
        assert!(!c.events.is_empty());
        (p, c.events)
    }

    /// A hand-built crosscoder whose single live feature reads the planted
    /// steer direction out of the plant layer's MLP output and decodes back
    /// along it.
    fn steer_probe(pair: &PairedCheckpoints, gain: f32, threshold: f32) -> CrosscoderModel {
        let cfg = &pair.pt.config;
        let d = cfg.d_model;
        let boundary = cfg.late_boundary;
        // Direction of the planted write: the unembedding column of 'Z',
        // normalized — the same construction the generator uses.
        let vocab = cfg.vocab_size;
        let mut dir: Vec<f32> = (0..d)
            .map(|i| pair.it.weights.lm_head.data[i * vocab + b'Z' as usize])
            .collect();
        let norm = dir.iter().map(|x| x * x).sum::<f32>().sqrt();
        for v in dir.iter_mut() {
            *v /= norm;
        }
        let mut model = CrosscoderModel {
            layer_set: vec![boundary],
            d_in: d,
            n_features: 2,
            k: 1,
            w_enc: Mat::zeros(2 * d, 2),
            b_enc: vec![0.0; 2],
            dec_pt: Mat::zeros(2, d),
            dec_it: Mat::zeros(2, d),
            b_dec_pt: vec![0.0; d],
            b_dec_it: vec![0.0; d],
            eval_threshold: vec![threshold, f32::INFINITY],
        };
        // Feature 0 reads the IT slot along the steer direction...
        for i in 0..d {
            model.w_enc.data[(d + i) * 2] = dir[i];
        }
        // ...and writes it back with the requested gain.
        for i in 0..d {
            model.dec_it.data[i] = gain * dir[i];
        }
        model
    }

    fn synthetic_dumps(n_rows: usize, d: usize, seed: u64) -> PairedDumps {
        let mut rng = draw_rng(seed, 9);
        let mut dumps = PairedDumps {
            layer_set: vec![5],
            d_in: d,
            n_rows,
            pt: Vec::new(),
            it: Vec::new(),
        };
        for _ in 0..n_rows {
            for _ in 0..d {
                dumps.pt.push(rng.gen_range(-1.0f32..1.0));
                dumps.it.push(rng.gen_range(-1.0f32..1.0));
            }
        }
        dumps
    }

    #[test]
    fn identity_init_reconstructs_perfectly_untrained() {
        let d = 6;
        let dumps = synthetic_dumps(40, d, 1);
        let model = CrosscoderModel::identity(5, d);
        let rows: Vec<usize> = (0..dumps.n_rows).collect();
        // One feature per coordinate: positive coordinates are reconstructed
        // exactly; negatives are lost to the ReLU, so VE is a reproducible
        // constant strictly between 0 and 1.
        let m = eval_metrics(&model, &dumps, &rows).unwrap();
        let m2 = eval_metrics(&model, &dumps, &rows).unwrap();
        assert_eq!(m.ve_pt, m2.ve_pt);
        assert_eq!(m.ve_it, m2.ve_it);
        assert!(m.ve_pt > 0.0 && m.ve_pt < 1.0, "ve {}", m.ve_pt);
    }

    #[test]
    fn batch_topk_selects_exactly_the_budget() {
        let d = 8;
        let dumps = synthetic_dumps(64, d, 2);
        let model = CrosscoderModel::random(5, d, 24, 3, 11);
        let rows: Vec<usize> = (0..16).collect();
        let mut grads = Grads::zeros(&model);
        let (_, min_selected) = batch_loss_and_grads(&model, &dumps, &rows, &mut grads);
        // Recount actives through the frozen thresholds of this batch: every
        // selected (row, feature) has value >= its feature's min.
        let budget = rows.len() * model.k;
        let mut positives = 0usize;
        for &r in &rows {
            let code = model.encode_pre(dumps.pt_row(r), dumps.it_row(r));
            positives += code.iter().filter(|&&v| v > 0.0).count();
        }
        let selected: usize = {
            // Rebuild the selection the same way to count it.
            let mut vals = Vec::new();
            for &r in &rows {
                let code = model.encode_pre(dumps.pt_row(r), dumps.it_row(r));
                for &v in &code {
                    if v > 0.0 {
                        vals.push(v);
                    }
                }
            }
            vals.len().min(budget)
        };
        assert_eq!(selected, budget.min(positives));
        assert!(min_selected.iter().any(|v| v.is_finite()));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let d = 3;
        let dumps = synthetic_dumps(12, d, 3);
        // k = n_features keeps the batch budget above the number of positive
        // codes, so the active set is the plain ReLU support and does not
        // shift when a parameter is nudged; the straight-through gradient is
        // then exact and finite differences only see f32 rounding noise.
        let mut model = CrosscoderModel::random(5, d, 5, 5, 4);
        let rows: Vec<usize> = (0..4).collect();
        let mut grads = Grads::zeros(&model);
        let (_, _) = batch_loss_and_grads(&model, &dumps, &rows, &mut grads);
        let loss_at = |m: &CrosscoderModel| {
            let mut g = Grads::zeros(m);
            batch_loss_and_grads(m, &dumps, &rows, &mut g).0
        };
        let h = 1e-2f32;
        let mut max_rel = 0.0f64;
        let mut check = |analytic: f64, param: &mut f32, model: &CrosscoderModel| {
            let orig = *param;
            // Central difference with the parameter temporarily displaced.
            let fd = {
                let p = param as *mut f32;
                unsafe {
                    *p = orig + h;
                    let up = loss_at(model);
                    *p = orig - h;
                    let down = loss_at(model);
                    *p = orig;
                    (up - down) / (2.0 * h as f64)
                }
            };
            let denom = analytic.abs().max(fd.abs()).max(1e-2);
            let rel = (analytic - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        };
        // Spot-check a spread of parameters from every tensor.
        let samples = [0usize, 1, 7, 13];
        for &i in &samples {
            let m_ptr = &model as *const CrosscoderModel;
            let idx = i % model.w_enc.data.len();
            let g = grads.w_enc[idx];
            unsafe {
                check(g, &mut model.w_enc.data[idx], &*m_ptr);
            }
            let idx = i % model.dec_pt.data.len();
            let g = grads.dec_pt[idx];
            unsafe {
                check(g, &mut model.dec_pt.data[idx], &*m_ptr);
            }
            let idx = i % model.dec_it.data.len();
            let g = grads.dec_it[idx];
            unsafe {
                check(g, &mut model.dec_it.data[idx], &*m_ptr);
            }
            let idx = i % model.b_enc.len();
            let g = grads.b_enc[idx];
            unsafe {
                check(g, &mut model.b_enc[idx], &*m_ptr);
            }
            let idx = i % model.b_dec_pt.len();
            let g = grads.b_dec_pt[idx];
            unsafe {
                check(g, &mut model.b_dec_pt[idx], &*m_ptr);
            }
        }
        assert!(max_rel < 5e-3, "max relative error {max_rel}");
    }

    #[test]
    fn planted_dictionary_is_recovered() {
        // Paired activations generated from a planted 8-feature dictionary
        // with k=2 active features per row.
        let d = 16;
        let n_feat_true = 8;
        let mut rng = draw_rng(21, 0);
        let mut dict_pt = Vec::new();
        let mut dict_it = Vec::new();
        for _ in 0..n_feat_true {
            let mut v: Vec<f32> = (0..2 * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            for x in v.iter_mut() {
                *x /= norm;
            }
            dict_pt.push(v[..d].to_vec());
            dict_it.push(v[d..].to_vec());
        }
        let mut dumps = PairedDumps {
            layer_set: vec![5],
            d_in: d,
            n_rows: 0,
            pt: Vec::new(),
            it: Vec::new(),
        };
        for _ in 0..1200 {
            let a = rng.gen_range(0..n_feat_true);
            let mut bf = rng.gen_range(0..n_feat_true - 1);
            if bf >= a {
                bf += 1;
            }
            let ca = rng.gen_range(0.5f32..2.0);
            let cb = rng.gen_range(0.5f32..2.0);
            let mut x_pt = vec![0.0f32; d];
            let mut x_it = vec![0.0f32; d];
            for i in 0..d {
                x_pt[i] = ca * dict_pt[a][i] + cb * dict_pt[bf][i];
                x_it[i] = ca * dict_it[a][i] + cb * dict_it[bf][i];
            }
            dumps.pt.extend_from_slice(&x_pt);
            dumps.it.extend_from_slice(&x_it);
            dumps.n_rows += 1;
        }
        let cfg = TrainConfig {
            n_features: 16,
            k: 2,
            lr: 0.02,
            steps: 3_000,
            batch_size: 32,
            seed: 5,
            holdout_stride: 5,
        };
        let (model, metrics) = train_crosscoder(&dumps, &cfg).unwrap();
        assert!(metrics.ve_pt >= 0.95, "ve_pt {}", metrics.ve_pt);
        assert!(metrics.ve_it >= 0.95, "ve_it {}", metrics.ve_it);
        // Every planted feature matches some learned combined decoder row.
        for t in 0..n_feat_true {
            let mut best = 0.0f64;
            for j in 0..model.n_features {
                let mut dot = 0.0f64;
                for i in 0..d {
                    dot += dict_pt[t][i] as f64 * model.dec_pt.data[j * d + i] as f64;
                    dot += dict_it[t][i] as f64 * model.dec_it.data[j * d + i] as f64;
                }
                best = best.max(dot.abs());
            }
            assert!(best >= 0.9, "feature {t} best cosine {best}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let dumps = synthetic_dumps(200, 8, 6);
        let cfg = TrainConfig {
            n_features: 16,
            k: 2,
            lr: 0.01,
            steps: 50,
            batch_size: 16,
            seed: 9,
            holdout_stride: 5,
        };
        let (a, ma) = train_crosscoder(&dumps, &cfg).unwrap();
        let (b, mb) = train_crosscoder(&dumps, &cfg).unwrap();
        assert_eq!(a.w_enc.data, b.w_enc.data);
        assert_eq!(a.eval_threshold, b.eval_threshold);
        assert_eq!(ma.ve_pt, mb.ve_pt);
    }

    #[test]
    fn misaligned_dumps_are_rejected() {
        let mut dumps = synthetic_dumps(20, 4, 7);
        dumps.it.pop();
        assert!(matches!(
            train_crosscoder(&dumps, &TrainConfig::default()),
            Err(Error::DumpMisaligned(_))
        ));
    }

    #[test]
    fn gate_thresholds() {
        let m = HeldoutMetrics {
            ve_pt: 0.8,
            ve_it: 0.82,
            mean_l0: 8.4,
            alive_fraction: 0.1,
            n_rows: 100,
        };
        assert!(evaluate_gate(&m, 8, 0.3, 0.01).passed);
        assert!(!evaluate_gate(&m, 8, 0.0, 0.01).passed, "needs causal drop");
        assert!(!evaluate_gate(&m, 8, 0.3, 0.2).passed, "random drop too big");
        let mut bad = m.clone();
        bad.ve_pt = 0.5;
        assert!(!evaluate_gate(&bad, 8, 0.3, 0.01).passed);
        let mut bad = m.clone();
        bad.mean_l0 = 10.0;
        assert!(!evaluate_gate(&bad, 8, 0.3, 0.01).passed, "L0 off by >10%");
        let mut bad = m;
        bad.alive_fraction = 0.5;
        assert!(!evaluate_gate(&bad, 8, 0.3, 0.01).passed);
    }

    #[test]
    fn feature_set_validation() {
        assert!(FeatureSet::new(vec![0, 1, 2], Selection::Bucket, 4).is_ok());
        assert!(FeatureSet::new(vec![0, 0], Selection::Bucket, 4).is_err());
        assert!(FeatureSet::new(vec![9], Selection::Bucket, 4).is_err());
        let s = FeatureSet::new(vec![1], Selection::CausalTopk, 8).unwrap();
        let r = matched_random_features(&[1, 2, 3, 4, 5], &s, 2, 8, 3).unwrap();
        assert_eq!(r.indices.len(), 2);
        assert!(!r.indices.contains(&1));
    }

    #[test]
    fn empty_set_edits_are_bit_exact_no_ops() {
        let (p, events) = gated_events(6);
        let model = steer_probe(&p, 1.0, 0.0);
        let empty = FeatureSet::empty(Selection::Bucket);
        let med = mediation_drop(&model, &p, &events, &empty, Readout::CommonIt).unwrap();
        assert_eq!(med.drop, 0.0);
        let gate = causal_gate(&model, &p, &events, &empty, Readout::CommonIt).unwrap();
        assert_eq!(gate.gate, 0.0);
        assert_eq!(gate.drop_coupled, 0.0);
        let rescue = feature_rescue(&model, &p, &events, &empty, Readout::CommonIt).unwrap();
        assert_eq!(rescue.rescue_gain, 0.0);
    }

    #[test]
    fn hooked_unedited_cells_match_the_factorial_bitwise() {
        let (p, events) = gated_events(4);
        let model = steer_probe(&p, 1.0, 0.0);
        for ev in &events {
            let pt_native = event_pt_native(&model, &p, ev).unwrap();
            let y_ii =
                edited_cell_margin(&model, &p, ev, Side::It, Readout::CommonIt, &pt_native, None)
                    .unwrap();
            let y_pi =
                edited_cell_margin(&model, &p, ev, Side::Pt, Readout::CommonIt, &pt_native, None)
                    .unwrap();
            assert_eq!(
                y_ii,
                score_cell(&p, ev, Side::It, Side::It, Readout::CommonIt).unwrap()
            );
            assert_eq!(
                y_pi,
                score_cell(&p, ev, Side::Pt, Side::It, Readout::CommonIt).unwrap()
            );
        }
    }

    #[test]
    fn steer_probe_mediates_the_planted_interaction() {
        let (p, events) = gated_events(16);
        let model = steer_probe(&p, 1.0, 0.0);
        let set = FeatureSet::new(vec![0], Selection::CausalTopk, 2).unwrap();
        let med = mediation_drop(&model, &p, &events, &set, Readout::CommonIt).unwrap();
        assert!(!med.degenerate_interaction);
        assert!(med.drop > 0.0, "drop {}", med.drop);
        let share = med.share.unwrap();
        assert!(share > 0.5, "share {share}");
    }

    #[test]
    fn never_active_feature_scores_zero_exactly() {
        let (p, events) = gated_events(4);
        let model = steer_probe(&p, 1.0, 0.0);
        let ranked =
            rank_features_causal(&model, &p, &events, Readout::CommonIt, true).unwrap();
        // Feature 1 has an infinite threshold: never active, score exactly 0.
        let f1 = ranked.scores.iter().find(|s| s.feature == 1).unwrap();
        assert_eq!(f1.score, 0.0);
        // Feature 0 carries the planted coupling and outranks it.
        assert_eq!(ranked.scores[0].feature, 0);
        assert!(ranked.scores[0].score > 0.0);
        let again = rank_features_causal(&model, &p, &events, Readout::CommonIt, true).unwrap();
        for (a, b) in ranked.scores.iter().zip(&again.scores) {
            assert_eq!(a.feature, b.feature);
            assert_eq!(a.score, b.score);
        }
    }

    #[test]
    fn single_feature_ablation_matches_closed_form_readout() {
        let (p, events) = gated_events(4);
        let model = steer_probe(&p, 1.0, 0.0);
        let ev = &events[0];
        let pt_native = event_pt_native(&model, &p, ev).unwrap();
        let full =
            edited_cell_margin(&model, &p, ev, Side::It, Readout::CommonIt, &pt_native, None)
                .unwrap();
        let set = [0usize];
        let edit = Edit::Scale {
            set: &set,
            alpha: 1.0,
        };
        let ablated = edited_cell_margin(
            &model,
            &p,
            ev,
            Side::It,
            Readout::CommonIt,
            &pt_native,
            Some(&edit),
        )
        .unwrap();
        // Closed form, f64: with the crosscoder on the *final* layer the
        // ablation shifts the pre-norm residual by −f·dec_it[0] at the event
        // position only; recompute both margins via explicit RMSNorm + dot
        // products.
        let final_layer = p.pt.config.n_layers - 1;
        let probe = CrosscoderModel {
            layer_set: vec![final_layer],
            ..model.clone()
        };
        let pt_native_final = event_pt_native(&probe, &p, ev).unwrap();
        let full_f = edited_cell_margin(
            &probe,
            &p,
            ev,
            Side::It,
            Readout::CommonIt,
            &pt_native_final,
            None,
        )
        .unwrap();
        let abl_f = edited_cell_margin(
            &probe,
            &p,
            ev,
            Side::It,
            Readout::CommonIt,
            &pt_native_final,
            Some(&edit),
        )
        .unwrap();
        let states = crate::runtime::forward_full(&p.it, &ev.prefix_token_ids).unwrap();
        let resid = states.row(states.n_pos - 1);
        let f = feature_activations_at(&probe, &p, ev, Side::It).unwrap()[0];
        let margin_of = |x: &[f32]| {
            let d = x.len();
            let cfg = &p.it.config;
            let mut ss = 0.0f64;
            for &v in x {
                ss += (v as f64) * (v as f64);
            }
            let scale = 1.0 / (ss / d as f64 + cfg.norm_eps as f64).sqrt();
            let vocab = cfg.vocab_size;
            let mut m = 0.0f64;
            for i in 0..d {
                let normed =
                    x[i] as f64 * scale * p.it.weights.final_norm[i] as f64;
                let w_it = p.it.weights.lm_head.data[i * vocab + ev.t_it as usize] as f64;
                let w_pt = p.it.weights.lm_head.data[i * vocab + ev.t_pt as usize] as f64;
                m += normed * (w_it - w_pt);
            }
            m
        };
        let shifted: Vec<f32> = resid
            .iter()
            .enumerate()
            .map(|(i, &v)| v - f * probe.dec_it.data[i])
            .collect();
        assert!((margin_of(resid) - full_f).abs() < 1e-3, "full margin");
        assert!(
            (margin_of(&shifted) - abl_f).abs() < 1e-3,
            "{} vs {}",
            margin_of(&shifted),
            abl_f
        );
        // Closed-form drop vs measured drop, tight tolerance.
        let closed = margin_of(resid) - margin_of(&shifted);
        assert!(
            (closed - (full_f - abl_f)).abs() < 1e-4,
            "closed {closed} vs measured {}",
            full_f - abl_f
        );
        // And the boundary-layer probe moves the margin at all.
        assert!((full - ablated).abs() > 0.0);
    }

    #[test]
    fn gated_feature_yields_pure_coupled_gate() {
        let (p, events) = gated_events(12);
        // Pick the event where the coupled cell activates the steer reader
        // hardest relative to the portable cell, and set the eval threshold
        // between the two: the feature then fires only with the IT upstream,
        // so the portable-cell edit is a bit-exact no-op and the gate equals
        // the coupled drop by construction.
        let base_model = steer_probe(&p, 1.0, 0.0);
        let mut best: Option<(DivergenceEvent, f32, f32)> = None;
        for ev in &events {
            let f_pi = feature_activations_at(&base_model, &p, ev, Side::Pt).unwrap()[0];
            let f_ii = feature_activations_at(&base_model, &p, ev, Side::It).unwrap()[0];
            let sep = f_ii - f_pi;
            if sep > 0.0 && best.as_ref().map_or(true, |(_, p0, i0)| sep > i0 - p0) {
                best = Some((ev.clone(), f_pi, f_ii));
            }
        }
        let (ev, f_pi, f_ii) = best.expect("some event separates the two upstreams");
        let threshold = (f_pi + f_ii) / 2.0;
        let model = steer_probe(&p, 1.0, threshold);
        let set = FeatureSet::new(vec![0], Selection::CausalTopk, 2).unwrap();
        let gate = causal_gate(&model, &p, &[ev], &set, Readout::CommonIt).unwrap();
        assert_eq!(gate.drop_portable, 0.0, "feature silent in (U_PT, L_IT)");
        assert_eq!(gate.gate, gate.drop_coupled);
        assert!(gate.gate > 0.0, "gate {}", gate.gate);
    }

    #[test]
    fn rescue_recovers_the_missing_margin() {
        let (p, events) = gated_events(12);
        let model = steer_probe(&p, 1.0, 0.0);
        let set = FeatureSet::new(vec![0], Selection::CausalTopk, 2).unwrap();
        let rescue = feature_rescue(&model, &p, &events, &set, Readout::CommonIt).unwrap();
        assert!(rescue.rescue_gain > 0.0, "gain {}", rescue.rescue_gain);
        assert!(rescue.n_filtered > 0);
        let frac = rescue.rescue_fraction.unwrap();
        assert!(frac > 0.2, "fraction {frac}");
    }

    #[test]
    fn handoff_window_rules_and_upper_bound() {
        let (p, events) = gated_events(8);
        let model = steer_probe(&p, 1.0, 0.0);
        let set = FeatureSet::new(vec![0], Selection::CausalTopk, 2).unwrap();
        let boundary = p.boundary();
        assert!(matches!(
            handoff_mediation(
                &model,
                &p,
                &events,
                0..boundary + 1,
                HandoffDirection::Rescue,
                &set,
                Readout::CommonIt
            ),
            Err(Error::WindowOverlapsLayerSet { .. })
        ));
        // Boundary-entry window: replacing the whole upstream turns the weak
        // hybrid into the native IT pass, so total equals the missing margin.
        let h = handoff_mediation(
            &model,
            &p,
            &events,
            0..boundary,
            HandoffDirection::Rescue,
            &set,
            Readout::CommonIt,
        )
        .unwrap();
        let mut missing = 0.0f64;
        for ev in &events {
            let y_ii = score_cell(&p, ev, Side::It, Side::It, Readout::CommonIt).unwrap();
            let y_pi = score_cell(&p, ev, Side::Pt, Side::It, Readout::CommonIt).unwrap();
            missing += y_ii - y_pi;
        }
        missing /= events.len() as f64;
        assert!(
            (h.total_effect - missing).abs() < 1e-9,
            "total {} vs missing {}",
            h.total_effect,
            missing
        );
        assert!(h.mediated_part > 0.0, "mediated {}", h.mediated_part);
    }

    #[test]
    fn identical_window_handoff_is_null() {
        // UpstreamOnly pairs share all late layers; a window inside the
        // shared region moves nothing.
        let p = gen_toy_pair(&ToyPairSpec {
            mode: ToyMode::LateOnly,
            config: cfg(),
            seed: 9,
        })
        .unwrap();
        let manifest = gen_toy_manifest(6, 9, true);
        let events = collect_first_divergences(&p, &manifest, 32).unwrap().events;
        assert!(!events.is_empty());
        let model = steer_probe(&p, 1.0, 0.0);
        let set = FeatureSet::new(vec![0], Selection::CausalTopk, 2).unwrap();
        // LateOnly: upstream layers are identical, so swapping a window of
        // them is a no-op.
        let h = handoff_mediation(
            &model,
            &p,
            &events,
            1..3,
            HandoffDirection::Rescue,
            &set,
            Readout::CommonIt,
        )
        .unwrap();
        assert_eq!(h.total_effect, 0.0);
        assert_eq!(h.mediated_part, 0.0);
    }

    #[test]
    fn dose_response_grid_properties() {
        let (p, events) = gated_events(24);
        let model = steer_probe(&p, 1.0, 0.0);
        let set = FeatureSet::new(vec![0], Selection::Bucket, 2).unwrap();
        let rows =
            bucket_edit_dose_response(&model, &p, &events, &set, &DEFAULT_DOSES, Readout::CommonIt)
                .unwrap();
        assert_eq!(rows[0].alpha, 0.0);
        assert_eq!(rows[0].drop, 0.0, "zero dose is exactly a no-op");
        // α = 1 coincides with the mediation drop by definition.
        let med = mediation_drop(&model, &p, &events, &set, Readout::CommonIt).unwrap();
        let at_one = rows.iter().find(|r| r.alpha == 1.0).unwrap();
        assert!(
            (at_one.drop - med.drop).abs() < 1e-12,
            "{} vs {}",
            at_one.drop,
            med.drop
        );
        // The RMS-norm nonlinearity downstream of the edit allows small dips
        // at low doses; require an increasing trend rather than strict
        // per-step monotonicity, and a clearly positive drop once the whole
        // feature contribution is removed.
        for w in rows.windows(2) {
            assert!(
                w[1].drop > w[0].drop - 0.05,
                "drop fell sharply: {} -> {}",
                w[0].drop,
                w[1].drop
            );
        }
        assert!(med.drop > 0.0, "full ablation drop {}", med.drop);
        let last = rows.last().unwrap();
        assert!(
            last.drop > rows[0].drop,
            "no overall dose response: {} vs {}",
            rows[0].drop,
            last.drop
        );
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cc.xccd");
        let model = CrosscoderModel::random(5, 6, 12, 3, 17);
        save_crosscoder(&path, &model).unwrap();
        let loaded = load_crosscoder(&path).unwrap();
        assert_eq!(loaded.layer_set, model.layer_set);
        assert_eq!(loaded.k, model.k);
        assert_eq!(loaded.w_enc.data, model.w_enc.data);
        assert_eq!(loaded.dec_pt.data, model.dec_pt.data);
        assert_eq!(loaded.dec_it.data, model.dec_it.data);
        assert_eq!(loaded.eval_threshold, model.eval_threshold);
    }

    #[test]
    fn dumps_align_with_events() {
        let (p, events) = gated_events(3);
        let layer = p.pt.config.n_layers - 1;
        let dumps = collect_paired_dumps(&p, &events, layer).unwrap();
        let expected: usize = events.iter().map(|e| e.prefix_token_ids.len()).sum();
        assert_eq!(dumps.n_rows, expected);
        assert_eq!(dumps.pt.len(), dumps.it.len());
        assert!(collect_paired_dumps(&p, &events, 99).is_err());
    }
}
