//! Stage-serial run orchestration: one JSON config in, one run directory
//! out.
//!
//! Each invocation executes the requested stages in fixed dependency order
//! (diverge → factorial → controls → bridges → crosscoder → closure →
//! report) and writes every result as JSON into a fresh run directory. All
//! artifacts embed the same header — toolkit version, config hash, input
//! content hashes, and the run seed — so any file can be traced back to the
//! exact inputs that produced it. Nothing in the pipeline reads clocks,
//! environment, or global RNG state: re-running the same config against the
//! same inputs produces byte-identical directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridges::{constrained_continuation, ContinuationVariant};
use crate::collect::{
    collect_first_divergences, read_manifest, write_events, EventsHeader, Exclusion,
};
use crate::container::{sha256_file, sha256_hex};
use crate::controls::{
    interpolation_sweep, pre_late_commitment, signed_permutation_null, DEFAULT_ALPHAS,
};
use crate::crosscoder::{
    collect_paired_dumps, evaluate_gate, matched_random_features, mediation_drop,
    rank_features_causal, save_crosscoder, train_crosscoder, FeatureSet, HeldoutMetrics,
    QualityGate, Selection, TrainConfig,
};
use crate::error::{Error, Result};
use crate::factorial::{score_factorial, CellMeans, Readout, ScaleConversions};
use crate::geometry::{
    closure_test, fit_boundary_pca, save_subspace, split_events_by_cluster, ClosureControl,
    ClosureResult,
};
use crate::report::emit_report;
use crate::runtime::{load_checkpoint, PairedCheckpoints};
use crate::stats::{cluster_bootstrap, BootstrapSummary};

/// Pipeline stages in canonical execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Diverge,
    Factorial,
    Controls,
    Bridges,
    Crosscoder,
    Closure,
    Report,
}

pub const ALL_STAGES: [Stage; 7] = [
    Stage::Diverge,
    Stage::Factorial,
    Stage::Controls,
    Stage::Bridges,
    Stage::Crosscoder,
    Stage::Closure,
    Stage::Report,
];

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Diverge => "diverge",
            Stage::Factorial => "factorial",
            Stage::Controls => "controls",
            Stage::Bridges => "bridges",
            Stage::Crosscoder => "crosscoder",
            Stage::Closure => "closure",
            Stage::Report => "report",
        }
    }

    /// The stage whose outputs this stage consumes.
    fn dependency(&self) -> Option<Stage> {
        match self {
            Stage::Diverge => None,
            Stage::Report => Some(Stage::Factorial),
            _ => Some(Stage::Diverge),
        }
    }
}

fn default_stages() -> Vec<Stage> {
    ALL_STAGES.to_vec()
}
fn default_budget() -> usize {
    48
}
fn default_bootstrap() -> usize {
    2_000
}
fn default_permutation_draws() -> usize {
    500
}
fn default_horizons() -> Vec<usize> {
    vec![0, 4, 8]
}
fn default_ranks() -> Vec<usize> {
    vec![0, 2, 8]
}
fn default_true() -> bool {
    true
}
fn default_closure_controls() -> Vec<ClosureControl> {
    vec![
        ClosureControl::None,
        ClosureControl::GaussianFull,
        ClosureControl::FullDelta,
    ]
}

/// Crosscoder stage settings; `layer` defaults to the pair's late boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrosscoderStageConfig {
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Events used for causal ranking and the gate's edit probes.
    #[serde(default = "default_gate_events")]
    pub gate_events: usize,
}

fn default_gate_events() -> usize {
    6
}

impl Default for CrosscoderStageConfig {
    fn default() -> Self {
        CrosscoderStageConfig {
            layer: None,
            train: TrainConfig {
                n_features: 32,
                k: 4,
                lr: 0.02,
                steps: 300,
                batch_size: 16,
                seed: 0,
                holdout_stride: 5,
            },
            gate_events: default_gate_events(),
        }
    }
}

/// Closure stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosureStageConfig {
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "default_true")]
    pub include_mean: bool,
    #[serde(default = "default_closure_controls")]
    pub controls: Vec<ClosureControl>,
}

impl Default for ClosureStageConfig {
    fn default() -> Self {
        ClosureStageConfig {
            ranks: default_ranks(),
            include_mean: true,
            controls: default_closure_controls(),
        }
    }
}

/// The single-document JSON run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pt: PathBuf,
    pub it: PathBuf,
    pub manifest: PathBuf,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_permutation_draws")]
    pub permutation_draws: usize,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub crosscoder: CrosscoderStageConfig,
    #[serde(default)]
    pub closure: ClosureStageConfig,
}

/// Provenance block embedded in every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub toolkit_version: String,
    pub config_sha256: String,
    pub pt_sha256: String,
    pub it_sha256: String,
    pub manifest_sha256: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub header: ArtifactHeader,
    pub stages: Vec<Stage>,
    pub config: PipelineConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FactorialArtifact {
    pub header: ArtifactHeader,
    pub readout: Readout,
    pub n_events: usize,
    pub n_dropped: usize,
    pub cells: Vec<crate::factorial::FourCell>,
    pub cell_means: CellMeans,
    pub scale_conversions: ScaleConversions,
    pub interaction_bootstrap: BootstrapSummary,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ControlsArtifact {
    pub header: ArtifactHeader,
    pub interpolation: crate::controls::InterpolationSweep,
    pub signed_permutation: crate::controls::SignedPermutationNull,
    pub commitment: crate::controls::CommitmentReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BridgesArtifact {
    pub header: ArtifactHeader,
    pub continuation_standard: crate::bridges::ContinuationReport,
    pub continuation_shuffled: crate::bridges::ContinuationReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CrosscoderArtifact {
    pub header: ArtifactHeader,
    pub layer: usize,
    pub train: TrainConfig,
    pub metrics: HeldoutMetrics,
    pub gate: QualityGate,
    pub top_features: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClosureArtifact {
    pub header: ArtifactHeader,
    pub results: Vec<ClosureResult>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExclusionsArtifact {
    pub header: ArtifactHeader,
    pub exclusions: Vec<Exclusion>,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(format!(
            "{what} not found at {}",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|_| {
        Error::MissingInput(format!("expected artifact at {}", path.display()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Requested stages in canonical order, deduplicated, with dependencies
/// checked.
fn plan_stages(requested: &[Stage]) -> Result<Vec<Stage>> {
    let mut plan = Vec::new();
    for stage in ALL_STAGES {
        if requested.contains(&stage) {
            if let Some(dep) = stage.dependency() {
                if !plan.contains(&dep) {
                    return Err(Error::StageDependencyUnmet {
                        stage: stage.name().into(),
                        requires: dep.name().into(),
                    });
                }
            }
            plan.push(stage);
        }
    }
    if plan.is_empty() {
        return Err(Error::EmptyInput("no stages requested".into()));
    }
    Ok(plan)
}

/// Run the configured stages into `out_dir`, which must not already contain
/// a run.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<()> {
    require_file(&config.pt, "PT checkpoint")?;
    require_file(&config.it, "IT checkpoint")?;
    require_file(&config.manifest, "prompt manifest")?;
    let plan = plan_stages(&config.stages)?;
    fs::create_dir_all(out_dir)?;

    let header = ArtifactHeader {
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(&serde_json::to_vec(config)?),
        pt_sha256: sha256_file(&config.pt)?,
        it_sha256: sha256_file(&config.it)?,
        manifest_sha256: sha256_file(&config.manifest)?,
        seed: config.seed,
    };
    write_json(
        &out_dir.join("run.json"),
        &RunMeta {
            header: header.clone(),
            stages: plan.clone(),
            config: config.clone(),
        },
    )?;

    let pair = PairedCheckpoints::new(load_checkpoint(&config.pt)?, load_checkpoint(&config.it)?)?;
    let manifest = read_manifest(&config.manifest)?;

    let mut events = Vec::new();
    for stage in plan {
        match stage {
            Stage::Diverge => {
                let collection = collect_first_divergences(&pair, &manifest, config.budget)?;
                events = collection.events.clone();
                write_events(
                    &out_dir.join("events.jsonl"),
                    &EventsHeader {
                        pt_checkpoint: header.pt_sha256.clone(),
                        it_checkpoint: header.it_sha256.clone(),
                        seed: Some(config.seed),
                        budget: config.budget,
                    },
                    &collection.events,
                )?;
                write_json(
                    &out_dir.join("exclusions.json"),
                    &ExclusionsArtifact {
                        header: header.clone(),
                        exclusions: collection.exclusions,
                    },
                )?;
            }
            Stage::Factorial => {
                let results = score_factorial(&pair, &events, config.readout)?;
                let means = CellMeans::from_results(&results)
                    .ok_or_else(|| Error::NoResults("factorial produced no cells".into()))?;
                let boot = cluster_bootstrap(
                    &results.clustered_interactions(),
                    config.bootstrap_resamples,
                    config.seed,
                    0.95,
                )?;
                let artifact = FactorialArtifact {
                    header: header.clone(),
                    readout: config.readout,
                    n_events: results.cells.len(),
                    n_dropped: results.dropped.len(),
                    cells: results.cells,
                    cell_means: means,
                    scale_conversions: crate::factorial::scale_conversions(&means),
                    interaction_bootstrap: boot,
                };
                write_json(&out_dir.join("factorial.json"), &artifact)?;
            }
            Stage::Controls => {
                let artifact = ControlsArtifact {
                    header: header.clone(),
                    interpolation: interpolation_sweep(
                        &pair,
                        &events,
                        &DEFAULT_ALPHAS,
                        config.readout,
                    )?,
                    signed_permutation: signed_permutation_null(
                        &pair,
                        &events,
                        config.readout,
                        config.seed,
                        config.permutation_draws,
                    )?,
                    commitment: pre_late_commitment(&pair, &events, config.readout)?,
                };
                write_json(&out_dir.join("controls.json"), &artifact)?;
            }
            Stage::Bridges => {
                let artifact = BridgesArtifact {
                    header: header.clone(),
                    continuation_standard: constrained_continuation(
                        &pair,
                        &events,
                        &config.horizons,
                        ContinuationVariant::Standard,
                        config.readout,
                        config.seed,
                    )?,
                    continuation_shuffled: constrained_continuation(
                        &pair,
                        &events,
                        &config.horizons,
                        ContinuationVariant::ShuffledTail,
                        config.readout,
                        config.seed,
                    )?,
                };
                write_json(&out_dir.join("bridges.json"), &artifact)?;
            }
            Stage::Crosscoder => {
                let layer = config.crosscoder.layer.unwrap_or(pair.boundary());
                let dumps = collect_paired_dumps(&pair, &events, layer)?;
                let mut train = config.crosscoder.train.clone();
                train.seed = config.seed;
                let (model, metrics) = train_crosscoder(&dumps, &train)?;
                save_crosscoder(&out_dir.join("crosscoder.xccd"), &model)?;
                let gate_events = &events[..events.len().min(config.crosscoder.gate_events)];
                let ranked =
                    rank_features_causal(&model, &pair, gate_events, config.readout, true)?;
                let positive: Vec<usize> = ranked
                    .scores
                    .iter()
                    .filter(|s| s.score > 0.0)
                    .take(200)
                    .map(|s| s.feature)
                    .collect();
                let alive: Vec<usize> = ranked
                    .scores
                    .iter()
                    .filter(|s| s.score != 0.0)
                    .map(|s| s.feature)
                    .collect();
                let top_set =
                    FeatureSet::new(positive.clone(), Selection::CausalTopk, model.n_features)?;
                let causal_drop = if top_set.indices.is_empty() {
                    0.0
                } else {
                    mediation_drop(&model, &pair, gate_events, &top_set, config.readout)?.drop
                };
                let pool: Vec<usize> = alive
                    .iter()
                    .copied()
                    .filter(|i| !top_set.indices.contains(i))
                    .collect();
                let random_drop = if pool.is_empty() {
                    0.0
                } else {
                    let size = top_set.indices.len().min(pool.len()).max(1);
                    let random = matched_random_features(
                        &pool,
                        &top_set,
                        size,
                        model.n_features,
                        config.seed,
                    )?;
                    mediation_drop(&model, &pair, gate_events, &random, config.readout)?.drop
                };
                let artifact = CrosscoderArtifact {
                    header: header.clone(),
                    layer,
                    train,
                    metrics: metrics.clone(),
                    gate: evaluate_gate(&metrics, model.k, causal_drop, random_drop),
                    top_features: positive,
                };
                write_json(&out_dir.join("crosscoder.json"), &artifact)?;
            }
            Stage::Closure => {
                let (train, held) = split_events_by_cluster(&events);
                if train.is_empty() || held.is_empty() {
                    return Err(Error::NoResults(
                        "closure needs events in at least two clusters".into(),
                    ));
                }
                let sub = fit_boundary_pca(&pair, &train)?;
                save_subspace(&out_dir.join("subspace.xpca"), &sub)?;
                let mut results = Vec::new();
                for &rank in &config.closure.ranks {
                    for &control in &config.closure.controls {
                        results.push(closure_test(
                            &pair,
                            &sub,
                            &held,
                            rank,
                            config.closure.include_mean,
                            control,
                            config.readout,
                            config.seed,
                        )?);
                    }
                }
                write_json(
                    &out_dir.join("closure.json"),
                    &ClosureArtifact {
                        header: header.clone(),
                        results,
                    },
                )?;
            }
            Stage::Report => {
                emit_report(out_dir)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::write_manifest;
    use crate::runtime::{
        gen_toy_manifest, gen_toy_pair, save_checkpoint, ModelConfig, ToyMode, ToyPairSpec,
        TOY_VOCAB_SIZE,
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

    fn fixture_dir() -> (tempfile::TempDir, PipelineConfig) {
        let dir = tempfile::tempdir().unwrap();
        let pair = gen_toy_pair(&ToyPairSpec {
            mode: ToyMode::GatedCoupling,
            config: cfg(),
            seed: 7,
        })
        .unwrap();
        let pt = dir.path().join("pt.xckpt");
        let it = dir.path().join("it.xckpt");
        save_checkpoint(&pair.pt, &pt).unwrap();
        save_checkpoint(&pair.it, &it).unwrap();
        let manifest_path = dir.path().join("manifest.jsonl");
        write_manifest(&manifest_path, &gen_toy_manifest(48, 7, true)).unwrap();
        let config = PipelineConfig {
            pt,
            it,
            manifest: manifest_path,
            stages: default_stages(),
            seed: 7,
            budget: 48,
            readout: Readout::CommonIt,
            bootstrap_resamples: 200,
            permutation_draws: 50,
            horizons: vec![0, 2],
            crosscoder: CrosscoderStageConfig {
                layer: None,
                train: TrainConfig {
                    n_features: 16,
                    k: 2,
                    lr: 0.02,
                    steps: 60,
                    batch_size: 8,
                    seed: 7,
                    holdout_stride: 5,
                },
                gate_events: 4,
            },
            closure: ClosureStageConfig {
                ranks: vec![0, 2],
                include_mean: true,
                controls: vec![ClosureControl::None, ClosureControl::FullDelta],
            },
        };
        (dir, config)
    }

    #[test]
    fn stage_planning_enforces_dependencies() {
        assert!(plan_stages(&[Stage::Diverge]).is_ok());
        assert!(matches!(
            plan_stages(&[Stage::Factorial]),
            Err(Error::StageDependencyUnmet { .. })
        ));
        assert!(matches!(
            plan_stages(&[Stage::Diverge, Stage::Report]),
            Err(Error::StageDependencyUnmet { .. })
        ));
        let plan = plan_stages(&[Stage::Report, Stage::Diverge, Stage::Factorial]).unwrap();
        assert_eq!(plan, vec![Stage::Diverge, Stage::Factorial, Stage::Report]);
    }

    #[test]
    fn diverge_only_run_writes_events_and_exclusions_only() {
        let (dir, mut config) = fixture_dir();
        config.stages = vec![Stage::Diverge];
        let out = dir.path().join("run");
        run_pipeline(&config, &out).unwrap();
        assert!(out.join("run.json").is_file());
        assert!(out.join("events.jsonl").is_file());
        assert!(out.join("exclusions.json").is_file());
        assert!(!out.join("factorial.json").exists());
        assert!(!out.join("report.json").exists());
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let (dir, mut config) = fixture_dir();
        config.pt = dir.path().join("absent.xckpt");
        assert!(matches!(
            run_pipeline(&config, &dir.path().join("run")),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn full_run_produces_positive_interaction_and_report() {
        let (dir, config) = fixture_dir();
        let out = dir.path().join("run");
        run_pipeline(&config, &out).unwrap();
        let factorial: FactorialArtifact = read_json(&out.join("factorial.json")).unwrap();
        assert!(factorial.n_events > 0);
        let boot = &factorial.interaction_bootstrap;
        assert!(
            boot.mean > 0.0 && boot.ci_lo > 0.0,
            "interaction {} CI [{}, {}]",
            boot.mean,
            boot.ci_lo,
            boot.ci_hi
        );
        for file in [
            "controls.json",
            "bridges.json",
            "crosscoder.json",
            "crosscoder.xccd",
            "closure.json",
            "subspace.xpca",
            "report.json",
            "report_four_cell.csv",
            "report_families.csv",
            "closure.csv",
        ] {
            assert!(out.join(file).is_file(), "missing {file}");
        }
        let report: serde_json::Value = read_json(&out.join("report.json")).unwrap();
        assert!(report.get("controls").is_some());
        assert_eq!(
            report["header"]["config_sha256"],
            serde_json::json!(factorial.header.config_sha256)
        );
    }

    #[test]
    fn rerun_is_byte_identical() {
        let (dir, config) = fixture_dir();
        let out_a = dir.path().join("run_a");
        let out_b = dir.path().join("run_b");
        run_pipeline(&config, &out_a).unwrap();
        run_pipeline(&config, &out_b).unwrap();
        let mut names: Vec<String> = fs::read_dir(&out_a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(names.len() >= 10);
        for name in names {
            let a = fs::read(out_a.join(&name)).unwrap();
            let b = fs::read(out_b.join(&name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs between reruns");
        }
    }
}
