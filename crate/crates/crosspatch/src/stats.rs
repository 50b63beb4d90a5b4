//! Cluster bootstrap, family-balanced aggregation, and permutation nulls.
//!
//! All resampling respects the data's grouping structure: bootstrap draws
//! resample whole prompt clusters (within-prompt correlation survives), and
//! aggregate centers are family-balanced (unweighted mean of family means,
//! invariant to per-family event counts). Every draw is seeded from
//! `(seed, draw index)`, so any subset of draws can be recomputed
//! independently and runs are exactly reproducible.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic per-draw generator: splitmix64 over (seed, draw index).
pub(crate) fn draw_rng(seed: u64, draw: u64) -> Pcg64 {
    let mut z = seed ^ draw.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    Pcg64::seed_from_u64(z ^ (z >> 31))
}

/// Linear-interpolation quantile of an already sorted sample.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_clusters: usize,
    pub n_values: usize,
}

/// Percentile cluster bootstrap: resample clusters with replacement, take the
/// mean of all member values each draw.
pub fn cluster_bootstrap(
    values: &[(String, f64)],
    n_resamples: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapSummary> {
    if values.is_empty() {
        return Err(Error::EmptyInput("cluster_bootstrap".into()));
    }
    if n_resamples == 0 {
        return Err(Error::EmptyInput("n_resamples must be >= 1".into()));
    }
    // Group values by cluster in first-appearance order.
    let mut clusters: Vec<(&str, Vec<f64>)> = Vec::new();
    for (id, v) in values {
        match clusters.iter_mut().find(|(cid, _)| cid == id) {
            Some((_, vs)) => vs.push(*v),
            None => clusters.push((id, vec![*v])),
        }
    }
    let mean = values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64;
    let mut means = Vec::with_capacity(n_resamples);
    for draw in 0..n_resamples {
        let mut rng = draw_rng(seed, draw as u64);
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..clusters.len() {
            let (_, vs) = &clusters[rng.gen_range(0..clusters.len())];
            sum += vs.iter().sum::<f64>();
            count += vs.len();
        }
        means.push(sum / count as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapSummary {
        mean,
        ci_lo: quantile(&means, alpha),
        ci_hi: quantile(&means, 1.0 - alpha),
        n_clusters: clusters.len(),
        n_values: values.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyBalance {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n_families: usize,
}

/// Unweighted mean (plus range and median) of per-family means.
pub fn family_balanced_mean(family_means: &[f64]) -> Result<FamilyBalance> {
    if family_means.is_empty() {
        return Err(Error::EmptyInput("family_balanced_mean".into()));
    }
    let n = family_means.len();
    let mut sorted = family_means.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    // Sum in sorted order so the result is exactly invariant to the caller's
    // family ordering.
    Ok(FamilyBalance {
        mean: sorted.iter().sum::<f64>() / n as f64,
        median,
        min: sorted[0],
        max: sorted[n - 1],
        n_families: n,
    })
}

/// Per-family means of (family, value) observations, sorted by family name.
pub fn family_means(values: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut acc: Vec<(String, f64, usize)> = Vec::new();
    for (fam, v) in values {
        match acc.iter_mut().find(|(f, _, _)| f == fam) {
            Some((_, sum, n)) => {
                *sum += v;
                *n += 1;
            }
            None => acc.push((fam.clone(), *v, 1)),
        }
    }
    acc.sort_by(|a, b| a.0.cmp(&b.0));
    acc.into_iter()
        .map(|(f, sum, n)| (f, sum / n as f64))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationSummary {
    pub observed: f64,
    pub null_mean: f64,
    pub null_q999: f64,
    pub p_value: f64,
    pub n_perms: usize,
}

/// Default permutation count; puts the attainable p floor at 5e-5.
pub const DEFAULT_N_PERMS: usize = 19_999;

/// Sign-flip (label-swap) null over per-event interactions. Swapping an
/// event's (t_pt, t_it) labels negates all four of its cell margins, so the
/// null flips each event's sign independently and recomputes the aggregate.
///
/// Ties between null and observed count half (mid-p), which keeps the
/// degenerate all-zero case at p ~ 0.5 instead of 1.
pub fn label_swap_null(
    event_values: &[f64],
    n_perms: usize,
    seed: u64,
) -> Result<PermutationSummary> {
    if event_values.is_empty() {
        return Err(Error::EmptyInput("label_swap_null".into()));
    }
    if n_perms == 0 {
        return Err(Error::EmptyInput("n_perms must be >= 1".into()));
    }
    let n = event_values.len() as f64;
    let observed = event_values.iter().sum::<f64>() / n;
    let mut exceed = 0.0f64;
    let mut nulls = Vec::with_capacity(n_perms);
    for perm in 0..n_perms {
        let mut rng = draw_rng(seed, perm as u64);
        let mut sum = 0.0;
        for &v in event_values {
            sum += if rng.gen::<bool>() { v } else { -v };
        }
        let null = sum / n;
        if null > observed {
            exceed += 1.0;
        } else if null == observed {
            exceed += 0.5;
        }
        nulls.push(null);
    }
    nulls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(PermutationSummary {
        observed,
        null_mean: nulls.iter().sum::<f64>() / n_perms as f64,
        null_q999: quantile(&nulls, 0.999),
        p_value: (1.0 + exceed) / (1.0 + n_perms as f64),
        n_perms,
    })
}
