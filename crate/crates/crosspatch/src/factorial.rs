//! The four-cell cross-patching factorial and its derived quantities.
//!
//! For an intervention site with divergent tokens (t_pt, t_it), the margin
//! Y(U, L) is logit(t_it) - logit(t_pt) under a hybrid forward pass: upstream
//! states U from one checkpoint are handed to the late stack L of another at
//! the boundary, and a fixed readout scores the result. The four cells
//! Y(U_PT,L_PT), Y(U_PT,L_IT), Y(U_IT,L_PT), Y(U_IT,L_IT) give two late
//! effects and their difference-in-differences, the interaction: the part of
//! the late stack's preference for t_it that exists only on the tuned model's
//! own upstream states.
//!
//! Both diagonal cells are bit-identical to the corresponding unsplit native
//! forwards because the split and unsplit passes share one code path.

use serde::{Deserialize, Serialize};

use crate::collect::{DivergenceEvent, Exclusion, ExclusionReason};
use crate::error::{Error, Result};
use crate::runtime::{
    argmax, forward_late, forward_mixed, forward_upstream, readout_position, BlockSpec,
    Checkpoint, PairedCheckpoints, ResidualStates,
};

/// Which checkpoint supplies a factor of a hybrid pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Pt,
    It,
}

/// Which final norm + unembedding scores a cell. `Native` reads each cell
/// with its own late model's reader; the common modes fix one reader for all
/// four cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    CommonIt,
    CommonPt,
    Native,
}

impl Default for Readout {
    fn default() -> Self {
        Readout::CommonIt
    }
}

impl Readout {
    pub(crate) fn reader<'a>(&self, pair: &'a PairedCheckpoints, late: Side) -> &'a Checkpoint {
        match (self, late) {
            (Readout::CommonIt, _) => &pair.it,
            (Readout::CommonPt, _) => &pair.pt,
            (Readout::Native, Side::Pt) => &pair.pt,
            (Readout::Native, Side::It) => &pair.it,
        }
    }
}

/// All four margins for one event plus the derived fields. The derived
/// values are stored differences of the stored cells, so the defining
/// identities hold exactly on the serialized record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FourCell {
    pub prompt_id: String,
    pub cluster_id: String,
    pub family: String,
    pub position: usize,
    pub y_pp: f64,
    pub y_pi: f64,
    pub y_ip: f64,
    pub y_ii: f64,
    pub late_effect_pt_up: f64,
    pub late_effect_it_up: f64,
    pub interaction: f64,
    pub readout: Readout,
}

impl FourCell {
    fn from_cells(ev: &DivergenceEvent, readout: Readout, y: [f64; 4]) -> Self {
        let [y_pp, y_pi, y_ip, y_ii] = y;
        FourCell {
            prompt_id: ev.prompt_id.clone(),
            cluster_id: ev.cluster_id.clone(),
            family: ev.family.clone(),
            position: ev.position,
            y_pp,
            y_pi,
            y_ip,
            y_ii,
            late_effect_pt_up: y_pi - y_pp,
            late_effect_it_up: y_ii - y_ip,
            interaction: (y_ii - y_ip) - (y_pi - y_pp),
            readout,
        }
    }
}

/// Factorial results with per-event drop accounting.
#[derive(Debug, Clone, Default)]
pub struct FactorialResults {
    pub cells: Vec<FourCell>,
    pub dropped: Vec<Exclusion>,
}

impl FactorialResults {
    pub fn interactions(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.interaction).collect()
    }

    /// (cluster_id, interaction) pairs for the cluster bootstrap.
    pub fn clustered_interactions(&self) -> Vec<(String, f64)> {
        self.cells
            .iter()
            .map(|c| (c.cluster_id.clone(), c.interaction))
            .collect()
    }

    pub fn mean_interaction(&self) -> Option<f64> {
        if self.cells.is_empty() {
            None
        } else {
            Some(self.interactions().iter().sum::<f64>() / self.cells.len() as f64)
        }
    }
}

fn check_event(pair: &PairedCheckpoints, ev: &DivergenceEvent) -> Result<()> {
    let vocab = pair.pt.config.vocab_size;
    for &t in ev
        .prefix_token_ids
        .iter()
        .chain([ev.t_pt, ev.t_it].iter())
    {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: vocab,
            });
        }
    }
    if ev.prefix_token_ids.is_empty() {
        return Err(Error::EmptyInput(format!("event {}", ev.prompt_id)));
    }
    Ok(())
}

/// Margin logit(t_it) - logit(t_pt) of one state tensor under one reader.
pub fn margin_at(
    states: &ResidualStates,
    pos: usize,
    reader: &Checkpoint,
    ev: &DivergenceEvent,
) -> Result<f64> {
    let logits = readout_position(states, pos, reader, true)?;
    Ok(logits[ev.t_it as usize] as f64 - logits[ev.t_pt as usize] as f64)
}

fn upstream_of<'a>(pair: &'a PairedCheckpoints, side: Side) -> &'a Checkpoint {
    match side {
        Side::Pt => &pair.pt,
        Side::It => &pair.it,
    }
}

/// One hybrid cell: upstream states from one model, late stack from another,
/// margin at the event position under the requested readout.
pub fn score_cell(
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
    upstream: Side,
    late: Side,
    readout: Readout,
) -> Result<f64> {
    check_event(pair, ev)?;
    let boundary = pair.boundary();
    let states = forward_upstream(upstream_of(pair, upstream), &ev.prefix_token_ids, boundary)?;
    score_cell_from_states(pair, ev, &states, late, readout)
}

/// Late stack + readout over precomputed boundary states; shared by the
/// factorial, the interpolation sweep, and boundary-state injection edits.
pub fn score_cell_from_states(
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
    states: &ResidualStates,
    late: Side,
    readout: Readout,
) -> Result<f64> {
    let late_model = match late {
        Side::Pt => &pair.pt,
        Side::It => &pair.it,
    };
    let out = forward_late(late_model, states, pair.boundary())?;
    margin_at(&out, out.n_pos - 1, readout.reader(pair, late), ev)
}

/// All four cells of one event, computing each upstream once.
pub fn four_cells(
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
    readout: Readout,
) -> Result<FourCell> {
    check_event(pair, ev)?;
    let boundary = pair.boundary();
    let u_pt = forward_upstream(&pair.pt, &ev.prefix_token_ids, boundary)?;
    let u_it = forward_upstream(&pair.it, &ev.prefix_token_ids, boundary)?;
    let y_pp = score_cell_from_states(pair, ev, &u_pt, Side::Pt, readout)?;
    let y_pi = score_cell_from_states(pair, ev, &u_pt, Side::It, readout)?;
    let y_ip = score_cell_from_states(pair, ev, &u_it, Side::Pt, readout)?;
    let y_ii = score_cell_from_states(pair, ev, &u_it, Side::It, readout)?;
    Ok(FourCell::from_cells(ev, readout, [y_pp, y_pi, y_ip, y_ii]))
}

/// The factorial over an event set; events that fail to score are dropped
/// into the exclusion log rather than aborting the run.
pub fn score_factorial(
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    readout: Readout,
) -> Result<FactorialResults> {
    let mut out = FactorialResults::default();
    for ev in events {
        match four_cells(pair, ev, readout) {
            Ok(cell) => out.cells.push(cell),
            Err(Error::TokenOutOfRange { .. }) | Err(Error::EmptyInput(_)) => {
                out.dropped.push(Exclusion {
                    prompt_id: ev.prompt_id.clone(),
                    reason: ExclusionReason::ScoreFailed,
                    horizon: None,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Aggregated cell means feeding the scale conversions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CellMeans {
    pub y_pp: f64,
    pub y_pi: f64,
    pub y_ip: f64,
    pub y_ii: f64,
}

impl CellMeans {
    pub fn from_results(results: &FactorialResults) -> Option<Self> {
        if results.cells.is_empty() {
            return None;
        }
        let n = results.cells.len() as f64;
        let mut m = CellMeans {
            y_pp: 0.0,
            y_pi: 0.0,
            y_ip: 0.0,
            y_ii: 0.0,
        };
        for c in &results.cells {
            m.y_pp += c.y_pp;
            m.y_pi += c.y_pi;
            m.y_ip += c.y_ip;
            m.y_ii += c.y_ii;
        }
        m.y_pp /= n;
        m.y_pi /= n;
        m.y_ip /= n;
        m.y_ii /= n;
        Some(m)
    }
}

const DEGENERATE_EPS: f64 = 1e-9;

/// Scale conversions of aggregated cell means. Ratio fields are `None` when
/// their denominator is degenerate (|x| < 1e-9), with the flag reported
/// explicitly rather than the row being dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleConversions {
    pub late_effect_pt_up: f64,
    pub late_effect_it_up: f64,
    pub interaction: f64,
    pub matched_portable_ratio: Option<f64>,
    pub portable_share: Option<f64>,
    pub native_diagonal_shift: f64,
    pub interaction_share: Option<f64>,
    pub odds_multiplier: f64,
    pub division_degenerate: bool,
}

pub fn scale_conversions(means: &CellMeans) -> ScaleConversions {
    let le_pt = means.y_pi - means.y_pp;
    let le_it = means.y_ii - means.y_ip;
    let interaction = le_it - le_pt;
    let shift = means.y_ii - means.y_pp;
    let pt_ok = le_pt.abs() >= DEGENERATE_EPS;
    let it_ok = le_it.abs() >= DEGENERATE_EPS;
    let shift_ok = shift.abs() >= DEGENERATE_EPS;
    ScaleConversions {
        late_effect_pt_up: le_pt,
        late_effect_it_up: le_it,
        interaction,
        matched_portable_ratio: pt_ok.then(|| le_it / le_pt),
        portable_share: it_ok.then(|| le_pt / le_it),
        native_diagonal_shift: shift,
        interaction_share: shift_ok.then(|| interaction / shift),
        odds_multiplier: interaction.exp(),
        division_degenerate: !(pt_ok && shift_ok),
    }
}

/// One stage of a fixed-support training-lineage sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub interaction_mean: f64,
    pub percent_of_final: Option<f64>,
    pub native_top1_rate: f64,
    pub n_events: usize,
    pub n_dropped: usize,
}

/// Score intermediate checkpoints on the *fixed* (t_base, t_final) labels
/// collected from the base-to-final pair: for each stage S the factorial
/// runs with PT := base and IT := S, plus the fraction of events where S's
/// own argmax already equals t_final.
pub fn stage_sweep(
    base: &Checkpoint,
    final_cp: &Checkpoint,
    stages: &[(String, Checkpoint)],
    events: &[DivergenceEvent],
    readout: Readout,
) -> Result<Vec<StageRow>> {
    let final_pair = PairedCheckpoints::new(base.clone(), final_cp.clone())?;
    let final_results = score_factorial(&final_pair, events, readout)?;
    let final_mean = final_results.mean_interaction();
    let mut rows = Vec::with_capacity(stages.len());
    for (name, stage) in stages {
        let pair = PairedCheckpoints::new(base.clone(), stage.clone())?;
        // Labels collected on base->final must be real tokens for the stage;
        // the shared-vocab precondition makes violations label drops, not
        // aborts.
        let mut kept = Vec::new();
        let mut dropped = 0usize;
        for ev in events {
            let ok = [ev.t_pt, ev.t_it].iter().all(|&t| {
                (t as usize) < stage.config.vocab_size && stage.real_token_mask[t as usize]
            });
            if ok {
                kept.push(ev.clone());
            } else {
                dropped += 1;
            }
        }
        let results = score_factorial(&pair, &kept, readout)?;
        let mean = results.mean_interaction().unwrap_or(0.0);
        let mut top1 = 0usize;
        for ev in &kept {
            let states = forward_upstream(stage, &ev.prefix_token_ids, stage.config.n_layers)?;
            let logits = readout_position(&states, states.n_pos - 1, stage, true)?;
            if argmax(&logits) == ev.t_it {
                top1 += 1;
            }
        }
        rows.push(StageRow {
            stage: name.clone(),
            interaction_mean: mean,
            percent_of_final: final_mean
                .filter(|f| f.abs() >= DEGENERATE_EPS)
                .map(|f| 100.0 * mean / f),
            native_top1_rate: if kept.is_empty() {
                0.0
            } else {
                top1 as f64 / kept.len() as f64
            },
            n_events: results.cells.len(),
            n_dropped: dropped + results.dropped.len(),
        });
    }
    Ok(rows)
}

/// Which sublayers a substitution window replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionUnit {
    FullBlock,
    MlpOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub identity_transfer_rate: f64,
    pub margin_gain: f64,
    pub n_events: usize,
}

/// Run the host model with a contiguous window of donor blocks (or donor MLP
/// sublayers) spliced in, and measure how often the host's argmax flips to
/// the donor's divergent token and how much the margin moves.
pub fn window_substitution_metrics(
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    window: std::ops::Range<usize>,
    unit: SubstitutionUnit,
    host: Side,
) -> Result<WindowMetrics> {
    let n_layers = pair.pt.config.n_layers;
    if window.start > window.end || window.end > n_layers {
        return Err(Error::WindowOutOfRange {
            start: window.start,
            end: window.end,
            n_layers,
        });
    }
    if events.is_empty() {
        return Err(Error::EmptyInput("window_substitution_metrics".into()));
    }
    let (host_cp, donor_cp) = match host {
        Side::Pt => (&pair.pt, &pair.it),
        Side::It => (&pair.it, &pair.pt),
    };
    let donor_token = |ev: &DivergenceEvent| match host {
        Side::Pt => ev.t_it,
        Side::It => ev.t_pt,
    };
    let blocks: Vec<BlockSpec> = (0..n_layers)
        .map(|l| {
            if window.contains(&l) {
                match unit {
                    SubstitutionUnit::FullBlock => {
                        BlockSpec::from_layer(l, &donor_cp.weights.layers[l])
                    }
                    SubstitutionUnit::MlpOnly => BlockSpec {
                        layer: l,
                        attn: &host_cp.weights.layers[l],
                        mlp: &donor_cp.weights.layers[l],
                    },
                }
            } else {
                BlockSpec::from_layer(l, &host_cp.weights.layers[l])
            }
        })
        .collect();

    let mut transferred = 0usize;
    let mut gain_sum = 0.0f64;
    for ev in events {
        check_event(pair, ev)?;
        let baseline = forward_upstream(host_cp, &ev.prefix_token_ids, n_layers)?;
        let substituted = forward_mixed(host_cp, blocks.clone(), &ev.prefix_token_ids, None)?;
        let pos = ev.prefix_token_ids.len() - 1;
        let base_margin = margin_at(&baseline, pos, host_cp, ev)?;
        let sub_margin = margin_at(&substituted, pos, host_cp, ev)?;
        gain_sum += sub_margin - base_margin;
        let logits = readout_position(&substituted, pos, host_cp, true)?;
        if argmax(&logits) == donor_token(ev) {
            transferred += 1;
        }
    }
    Ok(WindowMetrics {
        identity_transfer_rate: transferred as f64 / events.len() as f64,
        margin_gain: gain_sum / events.len() as f64,
        n_events: events.len(),
    })
}
