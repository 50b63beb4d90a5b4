//! Synthetic paired checkpoints and prompt manifests.
//!
//! Four generation modes cover the three causal structures an
//! instruction-tuning diff can have, plus a null:
//!
//! * `identical` — byte-equal weights; every patched cell must agree.
//! * `late_only` — the models differ only in the late stack, so the whole
//!   behavioral difference is portable across upstream states.
//! * `upstream_only` — the difference lives strictly below the boundary.
//! * `gated_coupling` — a planted two-stage mechanism: the IT model's first
//!   layer writes a message direction `v` into the residual stream on
//!   prompts containing a trigger byte, and the IT model's first late layer
//!   reads `v` and adds unembedding-aligned margin toward a designated
//!   target token. The cross term exists only when IT upstream states meet
//!   the IT late stack, so the four-cell interaction is positive by
//!   construction.
//!
//! `interpolate_checkpoints` builds synthetic training lineages by linear
//! weight interpolation, and `gen_toy_manifest` emits matching prompt sets.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::collect::PromptRecord;
use crate::error::{Error, Result};

use super::{
    toy_real_token_mask, toy_vocab, Checkpoint, LayerWeights, Mat, ModelConfig,
    PairedCheckpoints, Weights, TOY_VOCAB_SIZE,
};

/// Byte that marks a prompt as instruction-flagged for the planted coupling.
pub const TRIGGER_TOKEN: u32 = b'!' as u32;
/// Token the planted coupling steers toward.
pub const TARGET_TOKEN: u32 = b'Z' as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyMode {
    Identical,
    LateOnly,
    UpstreamOnly,
    GatedCoupling,
}

#[derive(Debug, Clone)]
pub struct ToyPairSpec {
    pub mode: ToyMode,
    pub config: ModelConfig,
    pub seed: u64,
}

// Planted-mechanism strengths. The upstream half writes a per-position dose
// of the message direction that varies strongly across positions (the spread
// factor widens layer-0 attention scores, so the attention weight on the
// trigger differs a lot from token to token); the late half reads the dose
// through a SiLU-gated product, which is quadratic in the dose. Divergences
// therefore select high-dose positions, while neighboring positions carry
// far weaker coupled margin -- the property the pre-divergence and
// random-disagreement baselines are built to expose.
const TRIGGER_GAIN: f32 = 6.0;
const WRITE_GAIN: f32 = 8.0;
const ATTN_SPREAD: f32 = 3.0;
const READ_GAIN: f32 = 1.2;
const STEER_GAIN: f32 = 8.0;

fn normal(rng: &mut Pcg64) -> f32 {
    // Box-Muller from two uniforms; good enough for weight init.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

fn rand_mat(rng: &mut Pcg64, rows: usize, cols: usize, sigma: f32) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = normal(rng) * sigma;
    }
    m
}

fn rand_unit(rng: &mut Pcg64, n: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..n).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn init_layer(rng: &mut Pcg64, cfg: &ModelConfig) -> LayerWeights {
    let d = cfg.d_model;
    let kvd = cfg.kv_dim();
    let s_d = 1.0 / (d as f32).sqrt();
    let s_ff = 1.0 / (cfg.d_ff as f32).sqrt();
    LayerWeights {
        wq: rand_mat(rng, d, d, s_d),
        wk: rand_mat(rng, d, kvd, s_d),
        wv: rand_mat(rng, d, kvd, s_d),
        wo: rand_mat(rng, d, d, s_d),
        norm_attn: vec![1.0; d],
        norm_mlp: vec![1.0; d],
        w_gate: rand_mat(rng, d, cfg.d_ff, s_d),
        w_up: rand_mat(rng, d, cfg.d_ff, s_d),
        w_down: rand_mat(rng, cfg.d_ff, d, s_ff),
    }
}

fn init_checkpoint(rng: &mut Pcg64, cfg: &ModelConfig) -> Checkpoint {
    let d = cfg.d_model;
    let s_d = 1.0 / (d as f32).sqrt();
    let (vocab, mask) = if cfg.vocab_size == TOY_VOCAB_SIZE {
        (toy_vocab(), toy_real_token_mask())
    } else {
        (
            (0..cfg.vocab_size).map(|i| format!("tok{i}")).collect(),
            vec![true; cfg.vocab_size],
        )
    };
    Checkpoint {
        config: cfg.clone(),
        weights: Weights {
            embed: rand_mat(rng, cfg.vocab_size, d, 1.0),
            layers: (0..cfg.n_layers).map(|_| init_layer(rng, cfg)).collect(),
            final_norm: vec![1.0; d],
            lm_head: rand_mat(rng, d, cfg.vocab_size, s_d),
        },
        vocab,
        real_token_mask: mask,
    }
}

/// Project `direction` out of every embedding row, then give the trigger row
/// a clean component along it.
fn orthogonalize_embed(embed: &mut Mat, direction: &[f32], boost_row: Option<(usize, f32)>) {
    for r in 0..embed.rows {
        let row = embed.row_mut(r);
        let c = dot(row, direction);
        for (x, &g) in row.iter_mut().zip(direction) {
            *x -= c * g;
        }
    }
    if let Some((r, gain)) = boost_row {
        let row = embed.row_mut(r);
        for (x, &g) in row.iter_mut().zip(direction) {
            *x += gain * g;
        }
    }
}

/// Plant an MLP-mediated reader in one hidden unit of a layer: the unit's
/// gate and up projections both read `read_dir` from the (normed) residual,
/// so its activation grows quadratically with the read, and its down
/// projection writes `steer_gain * steer` into the residual stream.
fn plant_mlp_reader(
    layer: &mut LayerWeights,
    cfg: &ModelConfig,
    read_dir: &[f32],
    steer: &[f32],
    read_gain: f32,
    steer_gain: f32,
) {
    let ff = cfg.d_ff;
    for i in 0..cfg.d_model {
        layer.w_gate.data[i * ff] += read_gain * read_dir[i];
        layer.w_up.data[i * ff] += read_gain * read_dir[i];
    }
    for j in 0..cfg.d_model {
        layer.w_down.data[j] += steer_gain * steer[j];
    }
}

/// Plant an attention-mediated linear channel in head 0 of one layer:
/// positions whose (normed) residual has a component along `read_dir` get a
/// value along an internal tap, and the output projection turns that tap
/// into `write_gain * write_dir` in the residual stream.
fn plant_channel(
    layer: &mut LayerWeights,
    cfg: &ModelConfig,
    read_dir: &[f32],
    write_dir: &[f32],
    read_gain: f32,
    write_gain: f32,
    tap: &[f32],
) {
    let hd = cfg.head_dim();
    let kvd = cfg.kv_dim();
    // Value projection of kv-head 0: value += read_gain * <read_dir, x> * tap.
    for i in 0..cfg.d_model {
        for j in 0..hd {
            layer.wv.data[i * kvd + j] += read_gain * read_dir[i] * tap[j];
        }
    }
    // Output projection of query head 0: out += write_gain * <tap, head> * write_dir.
    for i in 0..hd {
        for j in 0..cfg.d_model {
            layer.wo.data[i * cfg.d_model + j] += write_gain * tap[i] * write_dir[j];
        }
    }
}

pub fn gen_toy_pair(spec: &ToyPairSpec) -> Result<PairedCheckpoints> {
    spec.config.validate()?;
    let cfg = &spec.config;
    let mut rng = Pcg64::seed_from_u64(spec.seed);
    let mut pt = init_checkpoint(&mut rng, cfg);
    let boundary = cfg.late_boundary;

    let it = match spec.mode {
        ToyMode::Identical => pt.clone(),
        ToyMode::LateOnly => {
            let mut it = pt.clone();
            for l in boundary..cfg.n_layers {
                it.weights.layers[l] = init_layer(&mut rng, cfg);
            }
            it
        }
        ToyMode::UpstreamOnly => {
            let mut it = pt.clone();
            for l in 0..boundary {
                it.weights.layers[l] = init_layer(&mut rng, cfg);
            }
            it
        }
        ToyMode::GatedCoupling => {
            if cfg.vocab_size != TOY_VOCAB_SIZE {
                return Err(Error::InvalidSpec(format!(
                    "gated_coupling needs the byte vocab ({TOY_VOCAB_SIZE} tokens), got {}",
                    cfg.vocab_size
                )));
            }
            let d = cfg.d_model;
            let hd = cfg.head_dim();
            // Gate direction g (carried only by the trigger token) and message
            // direction v, orthogonal to each other.
            let g_dir = rand_unit(&mut rng, d);
            let mut v_dir = rand_unit(&mut rng, d);
            let c = dot(&v_dir, &g_dir);
            for (v, &g) in v_dir.iter_mut().zip(&g_dir) {
                *v -= c * g;
            }
            let norm = v_dir.iter().map(|x| x * x).sum::<f32>().sqrt();
            for v in v_dir.iter_mut() {
                *v /= norm;
            }
            let tap_write = rand_unit(&mut rng, hd);

            // Widen layer-0 head-0 attention scores in the *shared* base so
            // the attention weight on the trigger token varies strongly from
            // position to position; the planted write inherits that spread as
            // a per-position dose.
            let layer0 = &mut pt.weights.layers[0];
            for i in 0..d {
                for j in 0..hd {
                    layer0.wq.data[i * d + j] *= ATTN_SPREAD;
                    layer0.wk.data[i * cfg.kv_dim() + j] *= ATTN_SPREAD;
                }
            }

            // Dedicate the layer-0 head-0 value channel the same way: with the
            // base value and output projections zeroed, the head is inert in
            // PT and, in IT, carries exactly the planted trigger-gated write.
            let kvd = cfg.kv_dim();
            for i in 0..d {
                for j in 0..hd {
                    layer0.wv.data[i * kvd + j] = 0.0;
                }
            }
            for i in 0..hd {
                for j in 0..d {
                    layer0.wo.data[i * d + j] = 0.0;
                }
            }

            // Dedicate hidden unit 0 of the plant layer's MLP: zeroing its
            // weights in the shared init makes the PT copy inert and the IT
            // plant a noise-free reader of the message dose.
            let plant_layer = &mut pt.weights.layers[boundary];
            for i in 0..d {
                plant_layer.w_gate.data[i * cfg.d_ff] = 0.0;
                plant_layer.w_up.data[i * cfg.d_ff] = 0.0;
            }
            for j in 0..d {
                plant_layer.w_down.data[j] = 0.0;
            }

            // Shared embedding carries g only on the trigger token and no
            // incidental v anywhere.
            orthogonalize_embed(
                &mut pt.weights.embed,
                &g_dir,
                Some((TRIGGER_TOKEN as usize, TRIGGER_GAIN)),
            );
            orthogonalize_embed(&mut pt.weights.embed, &v_dir, None);

            // Make the message direction silent everywhere except the
            // planted late reader: project v out of every unembedding column
            // and out of the input side of every downstream read map, so the
            // dose reaches the logits only through the planted coupling and
            // never as an incidental leak that would flip unrelated tokens.
            let vocab = cfg.vocab_size;
            for t in 0..vocab {
                let mut c = 0.0f32;
                for i in 0..d {
                    c += pt.weights.lm_head.data[i * vocab + t] * v_dir[i];
                }
                for i in 0..d {
                    pt.weights.lm_head.data[i * vocab + t] -= c * v_dir[i];
                }
            }
            let project_input = |m: &mut Mat, dir: &[f32]| {
                for col in 0..m.cols {
                    let mut c = 0.0f32;
                    for i in 0..m.rows {
                        c += m.data[i * m.cols + col] * dir[i];
                    }
                    for i in 0..m.rows {
                        m.data[i * m.cols + col] -= c * dir[i];
                    }
                }
            };
            for l in 1..cfg.n_layers {
                let layer = &mut pt.weights.layers[l];
                project_input(&mut layer.wq, &v_dir);
                project_input(&mut layer.wk, &v_dir);
                project_input(&mut layer.wv, &v_dir);
                project_input(&mut layer.w_gate, &v_dir);
                project_input(&mut layer.w_up, &v_dir);
            }

            // Steer direction: the unembedding column of the target token.
            let mut steer: Vec<f32> = (0..d)
                .map(|i| pt.weights.lm_head.data[i * vocab + TARGET_TOKEN as usize])
                .collect();
            let norm = steer.iter().map(|x| x * x).sum::<f32>().sqrt();
            for s in steer.iter_mut() {
                *s /= norm;
            }

            let mut it = pt.clone();
            // Upstream half of the mechanism: trigger (g) -> message (v).
            plant_channel(
                &mut it.weights.layers[0],
                cfg,
                &g_dir,
                &v_dir,
                WRITE_GAIN,
                1.0,
                &tap_write,
            );
            // Late half: the first late layer's MLP reads the message (v)
            // from the current position only and steers toward the target.
            plant_mlp_reader(
                &mut it.weights.layers[boundary],
                cfg,
                &v_dir,
                &steer,
                READ_GAIN,
                STEER_GAIN,
            );
            it
        }
    };

    PairedCheckpoints::new(pt, it)
}

/// Linear weight-space interpolation `(1 - alpha) * base + alpha * final`,
/// used to build synthetic training lineages for stage sweeps.
pub fn interpolate_checkpoints(base: &Checkpoint, fin: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    if base.config != fin.config || base.vocab != fin.vocab {
        return Err(Error::PairMismatch(
            "interpolation endpoints must share config and vocab".into(),
        ));
    }
    let a = alpha as f32;
    let lerp_vec = |x: &[f32], y: &[f32]| -> Vec<f32> {
        x.iter().zip(y).map(|(&p, &q)| (1.0 - a) * p + a * q).collect()
    };
    let lerp_mat = |x: &Mat, y: &Mat| -> Mat {
        Mat {
            rows: x.rows,
            cols: x.cols,
            data: lerp_vec(&x.data, &y.data),
        }
    };
    let layers = base
        .weights
        .layers
        .iter()
        .zip(&fin.weights.layers)
        .map(|(p, q)| LayerWeights {
            wq: lerp_mat(&p.wq, &q.wq),
            wk: lerp_mat(&p.wk, &q.wk),
            wv: lerp_mat(&p.wv, &q.wv),
            wo: lerp_mat(&p.wo, &q.wo),
            norm_attn: lerp_vec(&p.norm_attn, &q.norm_attn),
            norm_mlp: lerp_vec(&p.norm_mlp, &q.norm_mlp),
            w_gate: lerp_mat(&p.w_gate, &q.w_gate),
            w_up: lerp_mat(&p.w_up, &q.w_up),
            w_down: lerp_mat(&p.w_down, &q.w_down),
        })
        .collect();
    Ok(Checkpoint {
        config: base.config.clone(),
        weights: Weights {
            embed: lerp_mat(&base.weights.embed, &fin.weights.embed),
            layers,
            final_norm: lerp_vec(&base.weights.final_norm, &fin.weights.final_norm),
            lm_head: lerp_mat(&base.weights.lm_head, &fin.weights.lm_head),
        },
        vocab: base.vocab.clone(),
        real_token_mask: base.real_token_mask.clone(),
    })
}

const VERBS: [&str; 8] = ["solve", "list", "sort", "name", "give", "pick", "write", "show"];
const OBJECTS: [&str; 6] = [
    "the letter",
    "a digit",
    "the code",
    "an item",
    "the key",
    "the answer",
];
const FAMILIES: [&str; 5] = ["arith", "list", "format", "recall", "style"];

/// Synthetic instruction manifest. With `trigger` set, every prompt contains
/// the trigger byte and carries the planted target letter as its expected
/// answer; otherwise the prompts are neutral.
pub fn gen_toy_manifest(n_prompts: usize, seed: u64, trigger: bool) -> Vec<PromptRecord> {
    let mut rng = Pcg64::seed_from_u64(seed ^ 0x6d61_6e69_6665_7374);
    (0..n_prompts)
        .map(|i| {
            let verb = VERBS[rng.gen_range(0..VERBS.len())];
            let obj = OBJECTS[rng.gen_range(0..OBJECTS.len())];
            let pad = "very ".repeat(rng.gen_range(0..4));
            let text = if trigger {
                format!("{verb} {obj} {pad}now! case {i}: ")
            } else {
                format!("{verb} {obj} {pad}now, case {i}: ")
            };
            let id = format!("p{i:04}");
            PromptRecord {
                id: id.clone(),
                category: "instruction".into(),
                source: "synthetic".into(),
                text,
                cluster_id: id,
                family: FAMILIES[i % FAMILIES.len()].into(),
                answer: if trigger { Some("Z".into()) } else { None },
            }
        })
        .collect()
}
