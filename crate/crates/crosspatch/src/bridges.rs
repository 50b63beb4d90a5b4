//! Consequence bridges: from one-token margins to multi-token outcomes.
//!
//! The factorial scores a single next-token margin. These bridges check that
//! the measured coupling carries forward into what the models actually say
//! next:
//!
//! * [`constrained_continuation`] extends each divergence event into a pair of
//!   fixed candidates — the divergent token plus N tokens of greedy native
//!   continuation from each model — teacher-forces both candidates through
//!   the four hybrid cells, and takes the difference-in-differences of the
//!   summed candidate log-probabilities. At N = 0 this recovers the one-token
//!   factorial; tail controls (shuffled or excluded tails, a shared forced
//!   token) separate the first token's contribution from the tail's.
//! * [`forced_token_bridge`] forces one of four first tokens — the
//!   descendant-preferred token, the base-preferred token, a rank-matched
//!   alternative, or a class-matched alternative — lets the descendant model
//!   continue greedily, and scores only the suffix with a task validator.
//!   The descendant-minus-base success delta, with a cluster-bootstrap CI,
//!   says whether preferring the descendant's token actually changes task
//!   outcomes downstream.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::collect::{prompt_rng, DivergenceEvent, Exclusion, ExclusionReason, PromptRecord};
use crate::error::{Error, Result};
use crate::factorial::{four_cells, Readout, Side};
use crate::runtime::{
    decode, forward_full, forward_late, forward_upstream, greedy_rollout, readout_position,
    token_class, PairedCheckpoints,
};
use crate::stats::{cluster_bootstrap, BootstrapSummary};

/// How a continuation candidate pair is assembled and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationVariant {
    /// Forced divergent token + native greedy tail from each model.
    Standard,
    /// Both candidates share the descendant's forced first token; only the
    /// tails differ, isolating the tail's contribution.
    SameForced,
    /// The descendant candidate's tail positions 1..N are permuted before
    /// scoring, destroying tail coherence while keeping its token multiset.
    ShuffledTail,
    /// Standard candidates, but the forced first token's log-probability is
    /// excluded from every cell.
    TailOnlyView,
}

/// A pair of fixed token candidates for one event at one horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatePair {
    /// Forced t_it plus N native descendant tokens (length N + 1).
    pub descendant: Vec<u32>,
    /// Forced first token plus N native base tokens (length N + 1).
    pub base: Vec<u32>,
    pub horizon: usize,
    pub variant: ContinuationVariant,
}

/// Teacher-forced sequence margins of one event at one horizon: each cell is
/// logprob(descendant candidate) − logprob(base candidate) under that hybrid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceCell {
    pub prompt_id: String,
    pub cluster_id: String,
    pub family: String,
    pub horizon: usize,
    pub m_pp: f64,
    pub m_pi: f64,
    pub m_ip: f64,
    pub m_ii: f64,
    pub interaction: f64,
}

/// Per-horizon aggregate with survivor accounting. `c0_survivor_mean` is the
/// one-token factorial interaction recomputed on exactly the events that
/// survived candidate construction at this horizon, so horizon trends cannot
/// be explained by population shift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub n_events: usize,
    pub n_dropped: usize,
    pub mean_interaction: f64,
    pub c0_survivor_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuationReport {
    pub variant: ContinuationVariant,
    pub readout: Readout,
    pub rows: Vec<HorizonRow>,
    pub cells: Vec<SequenceCell>,
    pub exclusions: Vec<Exclusion>,
}

/// Build both candidates for one event: force the first token, then extend
/// with greedy native continuations (never hybrids).
pub fn build_candidates(
    pair: &PairedCheckpoints,
    ev: &DivergenceEvent,
    horizon: usize,
    variant: ContinuationVariant,
    seed: u64,
) -> Result<CandidatePair> {
    if ev.t_pt == ev.t_it {
        return Err(Error::InvalidSpec(format!(
            "event {}: divergent tokens are equal ({})",
            ev.prompt_id, ev.t_pt
        )));
    }
    let base_first = match variant {
        ContinuationVariant::SameForced => ev.t_it,
        _ => ev.t_pt,
    };
    let mut descendant = vec![ev.t_it];
    let mut base = vec![base_first];
    if horizon > 0 {
        let mut d_prompt = ev.prefix_token_ids.clone();
        d_prompt.push(ev.t_it);
        descendant.extend(greedy_rollout(&pair.it, &d_prompt, horizon)?);
        let mut b_prompt = ev.prefix_token_ids.clone();
        b_prompt.push(base_first);
        base.extend(greedy_rollout(&pair.pt, &b_prompt, horizon)?);
    }
    if descendant.len() != horizon + 1 || base.len() != horizon + 1 {
        return Err(Error::EmptyInput(format!(
            "event {}: continuation shorter than horizon {horizon}",
            ev.prompt_id
        )));
    }
    if variant == ContinuationVariant::ShuffledTail && horizon > 1 {
        let mut rng = prompt_rng(seed, &ev.prompt_id);
        descendant[1..].shuffle(&mut rng);
    }
    Ok(CandidatePair {
        descendant,
        base,
        horizon,
        variant,
    })
}

/// Log-softmax probability of `token` under masked logits, in f64.
fn token_logprob(logits: &[f32], token: u32) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse: f64 = logits
        .iter()
        .filter(|l| l.is_finite())
        .map(|&l| (l as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits[token as usize] as f64 - lse
}

/// Summed log-probability of a candidate teacher-forced through one hybrid
/// cell: upstream states over prompt + candidate, patched at the boundary,
/// late stack + fixed readout; each candidate token is scored at the position
/// that predicts it.
fn candidate_logprob(
    pair: &PairedCheckpoints,
    prefix: &[u32],
    candidate: &[u32],
    upstream: Side,
    late: Side,
    readout: Readout,
    skip_first: bool,
) -> Result<f64> {
    let upstream_model = match upstream {
        Side::Pt => &pair.pt,
        Side::It => &pair.it,
    };
    let late_model = match late {
        Side::Pt => &pair.pt,
        Side::It => &pair.it,
    };
    let mut tokens = prefix.to_vec();
    tokens.extend_from_slice(candidate);
    let states = forward_upstream(upstream_model, &tokens, pair.boundary())?;
    let out = forward_late(late_model, &states, pair.boundary())?;
    let reader = readout.reader(pair, late);
    let mut total = 0.0f64;
    let start = usize::from(skip_first);
    for (j, &tok) in candidate.iter().enumerate().skip(start) {
        let pos = prefix.len() - 1 + j;
        let logits = readout_position(&out, pos, reader, true)?;
        total += token_logprob(&logits, tok);
    }
    Ok(total)
}

/// Sequence-margin factorial of fixed candidate pairs over a horizon grid.
pub fn constrained_continuation(
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    horizons: &[usize],
    variant: ContinuationVariant,
    readout: Readout,
    seed: u64,
) -> Result<ContinuationReport> {
    if events.is_empty() {
        return Err(Error::EmptyInput("constrained_continuation".into()));
    }
    if horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSpec(
            "horizons must be strictly increasing".into(),
        ));
    }
    let skip_first = variant == ContinuationVariant::TailOnlyView;
    let mut rows = Vec::with_capacity(horizons.len());
    let mut cells = Vec::new();
    let mut exclusions = Vec::new();
    for &n in horizons {
        let mut sum = 0.0f64;
        let mut survivors = Vec::new();
        let mut dropped = 0usize;
        for ev in events {
            let cand = match build_candidates(pair, ev, n, variant, seed) {
                Ok(c) => c,
                Err(_) => {
                    dropped += 1;
                    exclusions.push(Exclusion {
                        prompt_id: ev.prompt_id.clone(),
                        reason: ExclusionReason::ContinuationFailed,
                        horizon: Some(n),
                    });
                    continue;
                }
            };
            let score = |u: Side, l: Side| -> Result<f64> {
                let d = candidate_logprob(
                    pair,
                    &ev.prefix_token_ids,
                    &cand.descendant,
                    u,
                    l,
                    readout,
                    skip_first,
                )?;
                let b = candidate_logprob(
                    pair,
                    &ev.prefix_token_ids,
                    &cand.base,
                    u,
                    l,
                    readout,
                    skip_first,
                )?;
                Ok(d - b)
            };
            let m_pp = score(Side::Pt, Side::Pt)?;
            let m_pi = score(Side::Pt, Side::It)?;
            let m_ip = score(Side::It, Side::Pt)?;
            let m_ii = score(Side::It, Side::It)?;
            let interaction = (m_ii - m_ip) - (m_pi - m_pp);
            sum += interaction;
            survivors.push(ev);
            cells.push(SequenceCell {
                prompt_id: ev.prompt_id.clone(),
                cluster_id: ev.cluster_id.clone(),
                family: ev.family.clone(),
                horizon: n,
                m_pp,
                m_pi,
                m_ip,
                m_ii,
                interaction,
            });
        }
        let mut c0_sum = 0.0f64;
        for ev in &survivors {
            c0_sum += four_cells(pair, ev, readout)?.interaction;
        }
        let n_events = survivors.len();
        rows.push(HorizonRow {
            horizon: n,
            n_events,
            n_dropped: dropped,
            mean_interaction: if n_events == 0 {
                0.0
            } else {
                sum / n_events as f64
            },
            c0_survivor_mean: if n_events == 0 {
                0.0
            } else {
                c0_sum / n_events as f64
            },
        });
    }
    Ok(ContinuationReport {
        variant,
        readout,
        rows,
        cells,
        exclusions,
    })
}

/// Which first token a forced-token branch pins before the descendant model
/// continues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// The descendant-preferred divergent token t_it.
    Descendant,
    /// The base-preferred divergent token t_pt.
    Base,
    /// Next real token by descendant logit rank, excluding both divergent
    /// tokens; logit ties resolved by lowest id.
    RankMatched,
    /// Nearest-rank real token whose text class (alphabetic / numeric /
    /// punctuation / space-leading) matches the descendant token.
    ClassMatched,
}

pub const ALL_BRANCHES: [Branch; 4] = [
    Branch::Descendant,
    Branch::Base,
    Branch::RankMatched,
    Branch::ClassMatched,
];

/// One scored (event, branch) row; serialized as JSONL by the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchScore {
    pub prompt_id: String,
    pub cluster_id: String,
    pub family: String,
    pub branch: Branch,
    pub forced_token: u32,
    pub success: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForcedTokenReport {
    /// Success rate per branch over scored events.
    pub branch_success: Vec<(Branch, f64)>,
    /// Mean per-event (descendant-forced − base-forced) success delta.
    pub delta_mean: f64,
    pub delta_ci: BootstrapSummary,
    pub n_scored: usize,
    pub rows: Vec<BranchScore>,
    pub exclusions: Vec<Exclusion>,
}

/// Exact-substring validator: success iff the expected answer occurs in the
/// decoded suffix.
pub fn exact_substring_validator(suffix: &str, answer: &str) -> Result<bool> {
    Ok(suffix.contains(answer))
}

/// Descendant-logit rank order over real tokens at the event position:
/// descending logit, ties by lowest id.
fn descendant_rank_order(pair: &PairedCheckpoints, ev: &DivergenceEvent) -> Result<Vec<u32>> {
    let states = forward_full(&pair.it, &ev.prefix_token_ids)?;
    let logits = readout_position(&states, states.n_pos - 1, &pair.it, true)?;
    let mut order: Vec<u32> = (0..logits.len() as u32)
        .filter(|&t| pair.it.real_token_mask[t as usize])
        .collect();
    order.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    Ok(order)
}

fn pick_rank_matched(order: &[u32], ev: &DivergenceEvent) -> Option<u32> {
    let rank_it = order.iter().position(|&t| t == ev.t_it)?;
    order[rank_it + 1..]
        .iter()
        .find(|&&t| t != ev.t_pt)
        .copied()
}

fn pick_class_matched(order: &[u32], ev: &DivergenceEvent) -> Option<u32> {
    let rank_it = order.iter().position(|&t| t == ev.t_it)?;
    let wanted = token_class(ev.t_it);
    // Scan outward by rank distance, preferring the lower-rank (stronger)
    // side on ties.
    for dist in 1..order.len() {
        for idx in [rank_it.checked_sub(dist), rank_it.checked_add(dist)] {
            let Some(idx) = idx else { continue };
            let Some(&t) = order.get(idx) else { continue };
            if t != ev.t_it && t != ev.t_pt && token_class(t) == wanted {
                return Some(t);
            }
        }
    }
    None
}

/// Force each branch's first token, continue with the descendant model for
/// `budget` greedy tokens, and validate the suffix only — the forced token is
/// excluded from scoring by construction.
pub fn forced_token_bridge<V>(
    pair: &PairedCheckpoints,
    events: &[DivergenceEvent],
    manifest: &[PromptRecord],
    budget: usize,
    validator: V,
    n_resamples: usize,
    seed: u64,
) -> Result<ForcedTokenReport>
where
    V: Fn(&str, &str) -> Result<bool>,
{
    if events.is_empty() {
        return Err(Error::EmptyInput("forced_token_bridge".into()));
    }
    let answers: HashMap<&str, &str> = manifest
        .iter()
        .filter_map(|r| r.answer.as_deref().map(|a| (r.id.as_str(), a)))
        .collect();

    let mut rows = Vec::new();
    let mut exclusions = Vec::new();
    let mut deltas = Vec::new();
    let mut success_count: HashMap<Branch, usize> = HashMap::new();
    let mut n_scored = 0usize;
    'events: for ev in events {
        if ev.t_pt == ev.t_it {
            exclusions.push(Exclusion {
                prompt_id: ev.prompt_id.clone(),
                reason: ExclusionReason::MalformedRecord,
                horizon: None,
            });
            continue;
        }
        let Some(answer) = answers.get(ev.prompt_id.as_str()) else {
            exclusions.push(Exclusion {
                prompt_id: ev.prompt_id.clone(),
                reason: ExclusionReason::UnscoreableCategory,
                horizon: None,
            });
            continue;
        };
        let order = descendant_rank_order(pair, ev)?;
        let rank_matched = pick_rank_matched(&order, ev);
        let class_matched = pick_class_matched(&order, ev);
        let (Some(rank_matched), Some(class_matched)) = (rank_matched, class_matched) else {
            exclusions.push(Exclusion {
                prompt_id: ev.prompt_id.clone(),
                reason: ExclusionReason::TargetTokenMissing,
                horizon: None,
            });
            continue;
        };
        let forced = |b: Branch| match b {
            Branch::Descendant => ev.t_it,
            Branch::Base => ev.t_pt,
            Branch::RankMatched => rank_matched,
            Branch::ClassMatched => class_matched,
        };
        let mut branch_rows = Vec::with_capacity(ALL_BRANCHES.len());
        for branch in ALL_BRANCHES {
            let tok = forced(branch);
            let mut prompt = ev.prefix_token_ids.clone();
            prompt.push(tok);
            let suffix = match greedy_rollout(&pair.it, &prompt, budget) {
                Ok(s) => s,
                Err(_) => {
                    exclusions.push(Exclusion {
                        prompt_id: ev.prompt_id.clone(),
                        reason: ExclusionReason::ContinuationFailed,
                        horizon: None,
                    });
                    continue 'events;
                }
            };
            let text = decode(&suffix);
            let success = match validator(&text, answer) {
                Ok(s) => s,
                Err(_) => {
                    exclusions.push(Exclusion {
                        prompt_id: ev.prompt_id.clone(),
                        reason: ExclusionReason::ScoreFailed,
                        horizon: None,
                    });
                    continue 'events;
                }
            };
            branch_rows.push(BranchScore {
                prompt_id: ev.prompt_id.clone(),
                cluster_id: ev.cluster_id.clone(),
                family: ev.family.clone(),
                branch,
                forced_token: tok,
                success,
            });
        }
        let s = |b: Branch| branch_rows.iter().find(|r| r.branch == b).unwrap().success;
        deltas.push((
            ev.cluster_id.clone(),
            f64::from(u8::from(s(Branch::Descendant))) - f64::from(u8::from(s(Branch::Base))),
        ));
        for r in &branch_rows {
            *success_count.entry(r.branch).or_insert(0) += usize::from(r.success);
        }
        n_scored += 1;
        rows.extend(branch_rows);
    }
    if n_scored == 0 {
        return Err(Error::NoResults(
            "forced_token_bridge: no scoreable events".into(),
        ));
    }
    let branch_success = ALL_BRANCHES
        .iter()
        .map(|&b| {
            (
                b,
                *success_count.get(&b).unwrap_or(&0) as f64 / n_scored as f64,
            )
        })
        .collect();
    let delta_ci = cluster_bootstrap(&deltas, n_resamples, seed, 0.95)?;
    let delta_mean = deltas.iter().map(|d| d.1).sum::<f64>() / deltas.len() as f64;
    Ok(ForcedTokenReport {
        branch_success,
        delta_mean,
        delta_ci,
        n_scored,
        rows,
        exclusions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::{collect_first_divergences, EventKind};
    use crate::factorial::score_factorial;
    use crate::runtime::{
        encode, gen_toy_manifest, gen_toy_pair, ModelConfig, ToyMode, ToyPairSpec, TOY_VOCAB_SIZE,
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

    fn pair(mode: ToyMode, seed: u64) -> PairedCheckpoints {
        gen_toy_pair(&ToyPairSpec {
            mode,
            config: cfg(),
            seed,
        })
        .unwrap()
    }

    fn gated_events(n: usize) -> (PairedCheckpoints, Vec<DivergenceEvent>) {
        let p = pair(ToyMode::GatedCoupling, 7);
        let manifest = gen_toy_manifest(n, 7, true);
        let c = collect_first_divergences(&p, &manifest, 48).unwrap();
        assert!(!c.events.is_empty());
        (p, c.events)
    }

    #[test]
    fn horizon_zero_recovers_the_token_factorial() {
        let (p, events) = gated_events(8);
        let report = constrained_continuation(
            &p,
            &events,
            &[0],
            ContinuationVariant::Standard,
            Readout::CommonIt,
            1,
        )
        .unwrap();
        let factorial = score_factorial(&p, &events, Readout::CommonIt).unwrap();
        assert_eq!(report.cells.len(), factorial.cells.len());
        for (seq, tok) in report.cells.iter().zip(&factorial.cells) {
            // A one-token candidate pair is scored at the same position from
            // the same distribution, so the log-softmax normalizer cancels.
            assert!(
                (seq.interaction - tok.interaction).abs() < 1e-6,
                "{} vs {}",
                seq.interaction,
                tok.interaction
            );
        }
        assert!(
            (report.rows[0].mean_interaction - factorial.mean_interaction().unwrap()).abs() < 1e-6
        );
        assert!(
            (report.rows[0].c0_survivor_mean - factorial.mean_interaction().unwrap()).abs() < 1e-9
        );
    }

    #[test]
    fn identical_pair_margins_vanish_at_every_horizon() {
        let p = pair(ToyMode::Identical, 5);
        let ev = DivergenceEvent {
            prompt_id: "x".into(),
            cluster_id: "x".into(),
            family: "f".into(),
            prefix_token_ids: encode("say something now! ok"),
            position: 0,
            t_pt: b'a' as u32,
            t_it: b'b' as u32,
            kind: EventKind::FirstDivergence,
            horizon: None,
        };
        let report = constrained_continuation(
            &p,
            &[ev],
            &[0, 1, 2, 4],
            ContinuationVariant::Standard,
            Readout::CommonIt,
            1,
        )
        .unwrap();
        for cell in &report.cells {
            // All four hybrids are the same model, so every cell sees the
            // same sequence margin and the DiD cancels exactly.
            assert_eq!(cell.m_pp, cell.m_pi);
            assert_eq!(cell.m_pp, cell.m_ip);
            assert_eq!(cell.m_pp, cell.m_ii);
            assert_eq!(cell.interaction, 0.0);
        }
    }

    #[test]
    fn candidate_shapes_and_variant_rules() {
        let (p, events) = gated_events(4);
        let ev = &events[0];
        let c = build_candidates(&p, ev, 8, ContinuationVariant::Standard, 1).unwrap();
        assert_eq!(c.descendant.len(), 9);
        assert_eq!(c.base.len(), 9);
        assert_eq!(c.descendant[0], ev.t_it);
        assert_eq!(c.base[0], ev.t_pt);

        let same = build_candidates(&p, ev, 4, ContinuationVariant::SameForced, 1).unwrap();
        assert_eq!(same.base[0], ev.t_it);

        let shuffled = build_candidates(&p, ev, 8, ContinuationVariant::ShuffledTail, 1).unwrap();
        assert_eq!(shuffled.descendant[0], c.descendant[0], "head is fixed");
        let mut a = shuffled.descendant[1..].to_vec();
        let mut b = c.descendant[1..].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b, "tail is a permutation");
        let again = build_candidates(&p, ev, 8, ContinuationVariant::ShuffledTail, 1).unwrap();
        assert_eq!(again.descendant, shuffled.descendant, "seed-deterministic");

        let mut bad = ev.clone();
        bad.t_pt = bad.t_it;
        assert!(build_candidates(&p, &bad, 2, ContinuationVariant::Standard, 1).is_err());
    }

    #[test]
    fn shuffled_tail_weakens_the_long_horizon_interaction() {
        let (p, events) = gated_events(12);
        let standard = constrained_continuation(
            &p,
            &events,
            &[8],
            ContinuationVariant::Standard,
            Readout::CommonIt,
            3,
        )
        .unwrap();
        let shuffled = constrained_continuation(
            &p,
            &events,
            &[8],
            ContinuationVariant::ShuffledTail,
            Readout::CommonIt,
            3,
        )
        .unwrap();
        assert!(
            shuffled.rows[0].mean_interaction < standard.rows[0].mean_interaction,
            "shuffled {} vs standard {}",
            shuffled.rows[0].mean_interaction,
            standard.rows[0].mean_interaction
        );
    }

    #[test]
    fn tail_only_view_excludes_the_forced_token() {
        let (p, events) = gated_events(6);
        let tail_only = constrained_continuation(
            &p,
            &events,
            &[0, 2],
            ContinuationVariant::TailOnlyView,
            Readout::CommonIt,
            1,
        )
        .unwrap();
        // With the first token excluded, a length-1 candidate scores nothing.
        for cell in tail_only.cells.iter().filter(|c| c.horizon == 0) {
            assert_eq!(cell.m_pp, 0.0);
            assert_eq!(cell.interaction, 0.0);
        }
        assert_eq!(tail_only.rows[0].mean_interaction, 0.0);
    }

    #[test]
    fn horizons_must_increase() {
        let (p, events) = gated_events(2);
        assert!(constrained_continuation(
            &p,
            &events,
            &[0, 2, 2],
            ContinuationVariant::Standard,
            Readout::CommonIt,
            1
        )
        .is_err());
    }

    #[test]
    fn always_true_validator_gives_zero_delta() {
        let (p, events) = gated_events(8);
        let manifest = gen_toy_manifest(8, 7, true);
        let report = forced_token_bridge(
            &p,
            &events,
            &manifest,
            4,
            |_, _| Ok(true),
            500,
            11,
        )
        .unwrap();
        assert_eq!(report.delta_mean, 0.0);
        assert_eq!(report.delta_ci.ci_lo, 0.0);
        assert_eq!(report.delta_ci.ci_hi, 0.0);
        for (_, rate) in &report.branch_success {
            assert_eq!(*rate, 1.0);
        }
    }

    #[test]
    fn forced_first_token_steers_suffix_success() {
        // Plant each event's answer as the descendant model's own first
        // continuation token after t_it: the descendant-forced suffix then
        // contains it by construction, while other forced tokens send the
        // greedy continuation elsewhere.
        let (p, events) = gated_events(48);
        let mut manifest = gen_toy_manifest(48, 7, true);
        let mut kept = Vec::new();
        for ev in &events {
            let mut prompt = ev.prefix_token_ids.clone();
            prompt.push(ev.t_it);
            let next = greedy_rollout(&p.it, &prompt, 1).unwrap()[0];
            if next >= 128 {
                continue;
            }
            let rec = manifest.iter_mut().find(|r| r.id == ev.prompt_id).unwrap();
            rec.answer = Some(decode(&[next]));
            kept.push(ev.clone());
        }
        assert!(kept.len() >= 8, "printable continuations: {}", kept.len());
        let report = forced_token_bridge(
            &p,
            &kept,
            &manifest,
            6,
            exact_substring_validator,
            2000,
            11,
        )
        .unwrap();
        let desc = report
            .branch_success
            .iter()
            .find(|(b, _)| *b == Branch::Descendant)
            .unwrap()
            .1;
        assert_eq!(desc, 1.0, "descendant-forced suffix starts with the answer");
        assert!(
            report.delta_mean > 0.0,
            "delta {} [{}, {}]",
            report.delta_mean,
            report.delta_ci.ci_lo,
            report.delta_ci.ci_hi
        );
    }

    #[test]
    fn suffix_only_scoring_ignores_the_forced_token_itself() {
        // Answer equal to the forced token's own text must not count unless
        // the suffix repeats it.
        let (p, events) = gated_events(12);
        let mut manifest = gen_toy_manifest(12, 7, true);
        let mut target = None;
        for ev in &events {
            if !(32..127).contains(&ev.t_it) {
                continue;
            }
            let mut prompt = ev.prefix_token_ids.clone();
            prompt.push(ev.t_it);
            let suffix = greedy_rollout(&p.it, &prompt, 4).unwrap();
            if suffix.iter().all(|&t| t != ev.t_it) {
                target = Some(ev.clone());
                break;
            }
        }
        let ev = target.expect("an event whose suffix does not repeat t_it");
        let rec = manifest.iter_mut().find(|r| r.id == ev.prompt_id).unwrap();
        rec.answer = Some(decode(&[ev.t_it]));
        let report = forced_token_bridge(
            &p,
            std::slice::from_ref(&ev),
            &manifest,
            4,
            exact_substring_validator,
            200,
            3,
        )
        .unwrap();
        let desc_row = report
            .rows
            .iter()
            .find(|r| r.branch == Branch::Descendant)
            .unwrap();
        assert!(!desc_row.success, "forced token must not score itself");
    }

    #[test]
    fn branch_token_selection_rules() {
        let (p, events) = gated_events(6);
        for ev in &events {
            let order = descendant_rank_order(&p, ev).unwrap();
            let rank = pick_rank_matched(&order, ev).unwrap();
            assert!(rank != ev.t_it && rank != ev.t_pt);
            let rank_it = order.iter().position(|&t| t == ev.t_it).unwrap();
            let rank_pos = order.iter().position(|&t| t == rank).unwrap();
            assert!(rank_pos > rank_it, "rank-matched comes after t_it");
            // Every token strictly between them must be the excluded t_pt.
            for &t in &order[rank_it + 1..rank_pos] {
                assert_eq!(t, ev.t_pt);
            }
            let class = pick_class_matched(&order, ev).unwrap();
            assert!(class != ev.t_it && class != ev.t_pt);
            assert_eq!(token_class(class), token_class(ev.t_it));
        }
    }

    #[test]
    fn missing_answers_are_logged_not_fatal() {
        let (p, events) = gated_events(4);
        let manifest = gen_toy_manifest(4, 7, false); // neutral: no answers
        let err = forced_token_bridge(
            &p,
            &events,
            &manifest,
            4,
            exact_substring_validator,
            100,
            1,
        );
        assert!(matches!(err, Err(Error::NoResults(_))));
    }
}
