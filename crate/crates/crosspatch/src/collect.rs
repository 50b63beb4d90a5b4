//! Prompt manifests, paired greedy rollouts, and divergence-event records.
//!
//! An intervention site is a prefix both models have processed plus the pair
//! of top-1 tokens they disagree on at the next position. The collectors here
//! produce the main first-divergence sites and the selection baselines
//! (random later disagreements, pre-divergence prefixes, native-history
//! sites at fixed horizons). Per-prompt problems never abort a run: they go
//! into an exclusion log, and events + exclusions always account for the
//! full manifest.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{encode, ModelDecoder, PairedCheckpoints};

/// One prompt from a JSONL manifest. `cluster_id` defaults to `id` when a
/// record omits it; `answer` is optional validator metadata for the
/// forced-token bridge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub category: String,
    pub source: String,
    pub text: String,
    #[serde(default)]
    pub cluster_id: String,
    #[serde(default)]
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    FirstDivergence,
    RandomPtRollout,
    RandomItRollout,
    PreDivergence,
    NativeHistory,
}

/// One scored intervention site. `prefix_token_ids` is the shared prompt plus
/// the generated prefix; `position` is the generated index of the
/// disagreement (0 = first token after the raw prompt), so the prompt
/// occupies the first `prefix_token_ids.len() - position` entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceEvent {
    pub prompt_id: String,
    pub cluster_id: String,
    pub family: String,
    pub prefix_token_ids: Vec<u32>,
    pub position: usize,
    pub t_pt: u32,
    pub t_it: u32,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    MalformedRecord,
    NoDivergence,
    TokenInvalid,
    NoLaterDisagreement,
    SkippedPositionZero,
    HorizonAgreement,
    ContinuationFailed,
    UnscoreableCategory,
    TargetTokenMissing,
    ScoreFailed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exclusion {
    pub prompt_id: String,
    pub reason: ExclusionReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

/// Events plus the exclusion log from one collection pass.
#[derive(Debug, Clone, Default)]
pub struct Collection {
    pub events: Vec<DivergenceEvent>,
    pub exclusions: Vec<Exclusion>,
}

impl Collection {
    fn exclude(&mut self, prompt_id: &str, reason: ExclusionReason) {
        self.exclusions.push(Exclusion {
            prompt_id: prompt_id.to_string(),
            reason,
            horizon: None,
        });
    }

    /// Sort the exclusion log by prompt id (and horizon) so concurrent
    /// producers would still emit identical artifacts.
    fn finish(mut self) -> Self {
        self.exclusions
            .sort_by(|a, b| (&a.prompt_id, a.horizon).cmp(&(&b.prompt_id, b.horizon)));
        self
    }
}

fn encode_prompt(pair: &PairedCheckpoints, record: &PromptRecord) -> Result<Vec<u32>> {
    let tokens = encode(&record.text);
    if tokens.is_empty() {
        return Err(Error::EmptyInput(format!("prompt {}", record.id)));
    }
    for &t in &tokens {
        let idx = t as usize;
        if idx >= pair.pt.config.vocab_size || !pair.pt.real_token_mask[idx] {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: pair.pt.config.vocab_size,
            });
        }
    }
    Ok(tokens)
}

/// Greedily decode both models in lockstep over a shared history and return
/// the first position where their top-1 tokens differ, if any, as
/// `(history_before_divergence, position, t_pt, t_it)`.
fn first_disagreement(
    pair: &PairedCheckpoints,
    prompt: &[u32],
    max_new: usize,
) -> Result<Option<(Vec<u32>, usize, u32, u32)>> {
    let mut pt = ModelDecoder::new(&pair.pt);
    let mut it = ModelDecoder::new(&pair.it);
    for &t in prompt {
        pt.push_token(t)?;
        it.push_token(t)?;
    }
    let mut history = prompt.to_vec();
    for step in 0..max_new {
        let a_pt = pt.argmax_next()?;
        let a_it = it.argmax_next()?;
        if a_pt != a_it {
            return Ok(Some((history, step, a_pt, a_it)));
        }
        pt.push_token(a_pt)?;
        it.push_token(a_pt)?;
        history.push(a_pt);
    }
    Ok(None)
}

/// First-divergence events: one per prompt whose paired greedy rollouts
/// disagree within the budget.
pub fn collect_first_divergences(
    pair: &PairedCheckpoints,
    manifest: &[PromptRecord],
    max_new: usize,
) -> Result<Collection> {
    let mut out = Collection::default();
    for record in manifest {
        let prompt = match encode_prompt(pair, record) {
            Ok(p) => p,
            Err(Error::TokenOutOfRange { .. }) => {
                out.exclude(&record.id, ExclusionReason::TokenInvalid);
                continue;
            }
            Err(Error::EmptyInput(_)) => {
                out.exclude(&record.id, ExclusionReason::MalformedRecord);
                continue;
            }
            Err(e) => return Err(e),
        };
        match first_disagreement(pair, &prompt, max_new)? {
            Some((history, position, t_pt, t_it)) => out.events.push(DivergenceEvent {
                prompt_id: record.id.clone(),
                cluster_id: record.cluster_id.clone(),
                family: record.family.clone(),
                prefix_token_ids: history,
                position,
                t_pt,
                t_it,
                kind: EventKind::FirstDivergence,
                horizon: None,
            }),
            None => out.exclude(&record.id, ExclusionReason::NoDivergence),
        }
    }
    Ok(out.finish())
}

/// Which model generates the history for baseline collectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutSource {
    Pt,
    It,
}

pub(crate) fn prompt_rng(seed: u64, prompt_id: &str) -> Pcg64 {
    // FNV-1a over the id keeps per-prompt draws independent of manifest order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in prompt_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    Pcg64::seed_from_u64(seed ^ h)
}

/// Random-local-disagreement baseline: roll the source model out greedily,
/// find every position where the two models' top-1 tokens differ given that
/// history, and sample one such position strictly after the first divergence.
pub fn collect_random_disagreements(
    pair: &PairedCheckpoints,
    manifest: &[PromptRecord],
    rollout_source: RolloutSource,
    seed: u64,
    max_new: usize,
) -> Result<Collection> {
    let (source, kind) = match rollout_source {
        RolloutSource::Pt => (&pair.pt, EventKind::RandomPtRollout),
        RolloutSource::It => (&pair.it, EventKind::RandomItRollout),
    };
    let mut out = Collection::default();
    for record in manifest {
        let prompt = match encode_prompt(pair, record) {
            Ok(p) => p,
            Err(Error::TokenOutOfRange { .. }) => {
                out.exclude(&record.id, ExclusionReason::TokenInvalid);
                continue;
            }
            Err(Error::EmptyInput(_)) => {
                out.exclude(&record.id, ExclusionReason::MalformedRecord);
                continue;
            }
            Err(e) => return Err(e),
        };
        // Decode the source history once while reading both models' argmax
        // at every generated position.
        let mut src = ModelDecoder::new(source);
        let mut pt = ModelDecoder::new(&pair.pt);
        let mut it = ModelDecoder::new(&pair.it);
        for &t in &prompt {
            src.push_token(t)?;
            pt.push_token(t)?;
            it.push_token(t)?;
        }
        let mut history = prompt.clone();
        let mut disagreements: Vec<(usize, u32, u32)> = Vec::new();
        for step in 0..max_new {
            let a_pt = pt.argmax_next()?;
            let a_it = it.argmax_next()?;
            if a_pt != a_it {
                disagreements.push((step, a_pt, a_it));
            }
            let next = src.argmax_next()?;
            src.push_token(next)?;
            pt.push_token(next)?;
            it.push_token(next)?;
            history.push(next);
        }
        // Keep only positions strictly after the first disagreement.
        if disagreements.len() < 2 {
            out.exclude(&record.id, ExclusionReason::NoLaterDisagreement);
            continue;
        }
        let later = &disagreements[1..];
        let mut rng = prompt_rng(seed, &record.id);
        let (position, t_pt, t_it) = later[rng.gen_range(0..later.len())];
        out.events.push(DivergenceEvent {
            prompt_id: record.id.clone(),
            cluster_id: record.cluster_id.clone(),
            family: record.family.clone(),
            prefix_token_ids: history[..prompt.len() + position].to_vec(),
            position,
            t_pt,
            t_it,
            kind,
            horizon: None,
        });
    }
    Ok(out.finish())
}

/// Pre-divergence control: step each first-divergence event back to the
/// latest agreeing prefix while keeping the *future* token pair as labels.
pub fn collect_pre_divergence(
    pair: &PairedCheckpoints,
    first_divergences: &[DivergenceEvent],
) -> Result<Collection> {
    let mut out = Collection::default();
    for ev in first_divergences {
        if ev.position == 0 {
            out.exclude(&ev.prompt_id, ExclusionReason::SkippedPositionZero);
            continue;
        }
        for t in [ev.t_pt, ev.t_it] {
            let idx = t as usize;
            if idx >= pair.pt.config.vocab_size || !pair.pt.real_token_mask[idx] {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: pair.pt.config.vocab_size,
                });
            }
        }
        let mut prefix = ev.prefix_token_ids.clone();
        prefix.pop();
        out.events.push(DivergenceEvent {
            prompt_id: ev.prompt_id.clone(),
            cluster_id: ev.cluster_id.clone(),
            family: ev.family.clone(),
            prefix_token_ids: prefix,
            position: ev.position - 1,
            t_pt: ev.t_pt,
            t_it: ev.t_it,
            kind: EventKind::PreDivergence,
            horizon: None,
        });
    }
    Ok(out.finish())
}

/// Native-history sites: one model's own rollout as history, kept at a fixed
/// horizon iff the two models disagree on the next token there.
pub fn collect_native_history(
    pair: &PairedCheckpoints,
    manifest: &[PromptRecord],
    history_source: RolloutSource,
    horizons: &[usize],
) -> Result<Collection> {
    let source = match history_source {
        RolloutSource::Pt => &pair.pt,
        RolloutSource::It => &pair.it,
    };
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    let mut out = Collection::default();
    for record in manifest {
        let prompt = match encode_prompt(pair, record) {
            Ok(p) => p,
            Err(Error::TokenOutOfRange { .. }) => {
                for &h in horizons {
                    out.exclusions.push(Exclusion {
                        prompt_id: record.id.clone(),
                        reason: ExclusionReason::TokenInvalid,
                        horizon: Some(h),
                    });
                }
                continue;
            }
            Err(Error::EmptyInput(_)) => {
                for &h in horizons {
                    out.exclusions.push(Exclusion {
                        prompt_id: record.id.clone(),
                        reason: ExclusionReason::MalformedRecord,
                        horizon: Some(h),
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let rollout = crate::runtime::greedy_rollout(source, &prompt, max_h)?;
        let mut pt = ModelDecoder::new(&pair.pt);
        let mut it = ModelDecoder::new(&pair.it);
        for &t in &prompt {
            pt.push_token(t)?;
            it.push_token(t)?;
        }
        let mut fed = 0usize;
        for &h in horizons {
            while fed < h {
                pt.push_token(rollout[fed])?;
                it.push_token(rollout[fed])?;
                fed += 1;
            }
            let a_pt = pt.argmax_next()?;
            let a_it = it.argmax_next()?;
            if a_pt == a_it {
                out.exclusions.push(Exclusion {
                    prompt_id: record.id.clone(),
                    reason: ExclusionReason::HorizonAgreement,
                    horizon: Some(h),
                });
                continue;
            }
            let mut prefix = prompt.clone();
            prefix.extend_from_slice(&rollout[..h]);
            out.events.push(DivergenceEvent {
                prompt_id: record.id.clone(),
                cluster_id: record.cluster_id.clone(),
                family: record.family.clone(),
                prefix_token_ids: prefix,
                position: h,
                t_pt: a_pt,
                t_it: a_it,
                kind: EventKind::NativeHistory,
                horizon: Some(h),
            });
        }
    }
    Ok(out.finish())
}

/// Re-verify an event against the checkpoints: both models must produce the
/// stored token pair at the site, and for first divergences they must agree
/// (and match the stored prefix) at every earlier generated position.
pub fn verify_event(pair: &PairedCheckpoints, event: &DivergenceEvent) -> Result<bool> {
    if event.prefix_token_ids.len() < event.position {
        return Ok(false);
    }
    let prompt_len = event.prefix_token_ids.len() - event.position;
    if prompt_len == 0 {
        return Ok(false);
    }
    let mut pt = ModelDecoder::new(&pair.pt);
    let mut it = ModelDecoder::new(&pair.it);
    for &t in &event.prefix_token_ids[..prompt_len] {
        pt.push_token(t)?;
        it.push_token(t)?;
    }
    if event.kind == EventKind::FirstDivergence {
        for &stored in &event.prefix_token_ids[prompt_len..] {
            let a_pt = pt.argmax_next()?;
            let a_it = it.argmax_next()?;
            if a_pt != a_it || a_pt != stored {
                return Ok(false);
            }
            pt.push_token(stored)?;
            it.push_token(stored)?;
        }
    } else {
        for &stored in &event.prefix_token_ids[prompt_len..] {
            pt.push_token(stored)?;
            it.push_token(stored)?;
        }
    }
    Ok(pt.argmax_next()? == event.t_pt && it.argmax_next()? == event.t_it)
}

/// Header line preceding event records in an events JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventsHeader {
    pub pt_checkpoint: String,
    pub it_checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub budget: usize,
}

/// Parse a JSONL manifest, applying the cluster-id default and validating
/// id uniqueness and non-empty text.
pub fn parse_manifest(text: &str) -> Result<Vec<PromptRecord>> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut record: PromptRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedManifest {
                line: i + 1,
                message: e.to_string(),
            })?;
        if record.text.is_empty() {
            return Err(Error::MalformedManifest {
                line: i + 1,
                message: format!("prompt {} has empty text", record.id),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::MalformedManifest {
                line: i + 1,
                message: format!("duplicate prompt id {}", record.id),
            });
        }
        if record.cluster_id.is_empty() {
            record.cluster_id = record.id.clone();
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_manifest(path: &std::path::Path) -> Result<Vec<PromptRecord>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

pub fn write_manifest(path: &std::path::Path, records: &[PromptRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Events JSONL: one header line, then one event per line.
pub fn write_events(
    path: &std::path::Path,
    header: &EventsHeader,
    events: &[DivergenceEvent],
) -> Result<()> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_events(path: &std::path::Path) -> Result<(EventsHeader, Vec<DivergenceEvent>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| Error::EmptyInput(format!("events file {}", path.display())))?;
    let header: EventsHeader = serde_json::from_str(header_line)?;
    let events = lines
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, events))
}
