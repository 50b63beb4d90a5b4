//! Command-line front end: one subcommand per pipeline stage, plus toy
//! checkpoint generation and full-run orchestration.
//!
//! Every subcommand reads checkpoints/manifests/events from explicit paths,
//! writes a single JSON (or container) artifact to `--out`, and exits with
//! 0 on success, 2 on validation failure, 3 on missing input, and 4 on an
//! internal numerical error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crosspatch::bridges::{
    constrained_continuation, exact_substring_validator, forced_token_bridge, ContinuationVariant,
};
use crosspatch::collect::{
    collect_first_divergences, read_events, read_manifest, write_events, EventsHeader,
};
use crosspatch::container::sha256_file;
use crosspatch::controls::{
    interpolation_sweep, pre_late_commitment, signed_permutation_null, DEFAULT_ALPHAS,
};
use crosspatch::crosscoder::{
    collect_paired_dumps, load_crosscoder, mediation_drop, rank_features_causal, save_crosscoder,
    train_crosscoder, FeatureSet, Selection, TrainConfig,
};
use crosspatch::error::Error;
use crosspatch::factorial::{
    scale_conversions, score_factorial, stage_sweep, CellMeans, Readout,
};
use crosspatch::geometry::{
    closure_test, fit_boundary_pca, save_subspace, split_events_by_cluster, ClosureControl,
};
use crosspatch::pipeline::{run_pipeline, PipelineConfig};
use crosspatch::report::emit_report;
use crosspatch::runtime::{
    gen_toy_manifest, gen_toy_pair, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig,
    PairedCheckpoints, ToyMode, ToyPairSpec, TOY_VOCAB_SIZE,
};
use crosspatch::stats::cluster_bootstrap;

#[derive(Parser)]
#[command(
    name = "crosspatch",
    about = "First-divergence cross-patching between paired transformer checkpoints",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReadoutArg {
    CommonIt,
    CommonPt,
    Native,
}

impl From<ReadoutArg> for Readout {
    fn from(r: ReadoutArg) -> Readout {
        match r {
            ReadoutArg::CommonIt => Readout::CommonIt,
            ReadoutArg::CommonPt => Readout::CommonPt,
            ReadoutArg::Native => Readout::Native,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyModeArg {
    Identical,
    LateOnly,
    UpstreamOnly,
    GatedCoupling,
}

impl From<ToyModeArg> for ToyMode {
    fn from(m: ToyModeArg) -> ToyMode {
        match m {
            ToyModeArg::Identical => ToyMode::Identical,
            ToyModeArg::LateOnly => ToyMode::LateOnly,
            ToyModeArg::UpstreamOnly => ToyMode::UpstreamOnly,
            ToyModeArg::GatedCoupling => ToyMode::GatedCoupling,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Standard,
    SameForced,
    ShuffledTail,
    TailOnlyView,
}

impl From<VariantArg> for ContinuationVariant {
    fn from(v: VariantArg) -> ContinuationVariant {
        match v {
            VariantArg::Standard => ContinuationVariant::Standard,
            VariantArg::SameForced => ContinuationVariant::SameForced,
            VariantArg::ShuffledTail => ContinuationVariant::ShuffledTail,
            VariantArg::TailOnlyView => ContinuationVariant::TailOnlyView,
        }
    }
}

/// Checkpoint pair shared by most subcommands.
#[derive(Args)]
struct PairArgs {
    /// Pretrained/base checkpoint path.
    #[arg(long)]
    pt: PathBuf,
    /// Instruction-tuned/descendant checkpoint path.
    #[arg(long)]
    it: PathBuf,
    /// Override the late-stack boundary layer stored in the checkpoints.
    #[arg(long)]
    boundary: Option<usize>,
}

impl PairArgs {
    fn load(&self) -> crosspatch::error::Result<PairedCheckpoints> {
        let mut pt = load_existing(&self.pt)?;
        let mut it = load_existing(&self.it)?;
        if let Some(b) = self.boundary {
            pt.config.late_boundary = b;
            it.config.late_boundary = b;
        }
        PairedCheckpoints::new(pt, it)
    }
}

fn load_existing(path: &PathBuf) -> crosspatch::error::Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingInput(format!(
            "checkpoint not found at {}",
            path.display()
        )));
    }
    load_checkpoint(path)
}

fn load_events(path: &PathBuf) -> crosspatch::error::Result<Vec<crosspatch::collect::DivergenceEvent>> {
    if !path.is_file() {
        return Err(Error::MissingInput(format!(
            "events file not found at {}",
            path.display()
        )));
    }
    Ok(read_events(path)?.1)
}

fn write_json<T: serde::Serialize>(path: &PathBuf, value: &T) -> crosspatch::error::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic checkpoint pair and prompt manifest.
    GenToy {
        #[arg(long, value_enum, default_value = "gated-coupling")]
        mode: ToyModeArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        prompts: usize,
        /// Output directory for pt.xckpt, it.xckpt, manifest.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect first-divergence events from paired greedy rollouts.
    Diverge {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 48)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output events JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the four-cell factorial over collected events.
    Factorial {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_enum, default_value = "common-it")]
        readout: ReadoutArg,
        /// Cluster-bootstrap resample count for the interaction CI.
        #[arg(long, default_value_t = 2000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolation sweep, signed-permutation null, and commitment control.
    Controls {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_enum, default_value = "common-it")]
        readout: ReadoutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Signed-permutation null draws.
        #[arg(long, default_value_t = 500)]
        draws: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Constrained-continuation margins over a horizon grid.
    BridgeContinuation {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        events: PathBuf,
        /// Strictly increasing horizons, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,4,8")]
        horizons: Vec<usize>,
        #[arg(long, value_enum, default_value = "standard")]
        variant: VariantArg,
        #[arg(long, value_enum, default_value = "common-it")]
        readout: ReadoutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forced-token suffix-only scoring against manifest answers.
    BridgeForced {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Suffix generation budget.
        #[arg(long, default_value_t = 32)]
        budget: usize,
        #[arg(long, default_value_t = 2000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a paired crosscoder on MLP dumps at one layer.
    CrosscoderTrain {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        events: PathBuf,
        /// Crosscoder layer; defaults to the late boundary.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 32)]
        features: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output crosscoder container path; metrics land next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank features causally and measure top-set mediation.
    CrosscoderAnalyze {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        crosscoder: PathBuf,
        /// Size of the top causal feature set to ablate.
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long, value_enum, default_value = "common-it")]
        readout: ReadoutArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Boundary-state PCA closure on a cluster-disjoint split.
    Closure {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,2,8")]
        ranks: Vec<usize>,
        #[arg(long, default_value_t = true)]
        include_mean: bool,
        #[arg(long, value_enum, default_value = "common-it")]
        readout: ReadoutArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON path; the fitted subspace lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-support sweep over intermediate checkpoints.
    StageSweep {
        /// Base checkpoint.
        #[arg(long)]
        pt: PathBuf,
        /// Final descendant checkpoint.
        #[arg(long)]
        it: PathBuf,
        /// Intermediate checkpoints as name=path, comma separated.
        #[arg(long, value_delimiter = ',')]
        stage: Vec<String>,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_enum, default_value = "common-it")]
        readout: ReadoutArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit report.json and CSV tables from a run directory.
    Report {
        /// Run directory produced by `run`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a multi-stage pipeline from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
}

fn toy_config() -> ModelConfig {
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

fn run(cli: Cli) -> crosspatch::error::Result<()> {
    match cli.command {
        Command::GenToy {
            mode,
            seed,
            prompts,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            let pair = gen_toy_pair(&ToyPairSpec {
                mode: mode.into(),
                config: toy_config(),
                seed,
            })?;
            save_checkpoint(&pair.pt, &out.join("pt.xckpt"))?;
            save_checkpoint(&pair.it, &out.join("it.xckpt"))?;
            crosspatch::collect::write_manifest(
                &out.join("manifest.jsonl"),
                &gen_toy_manifest(prompts, seed, true),
            )?;
            println!(
                "wrote pt.xckpt, it.xckpt, manifest.jsonl ({prompts} prompts) to {}",
                out.display()
            );
        }
        Command::Diverge {
            pair,
            manifest,
            budget,
            seed,
            out,
        } => {
            let p = pair.load()?;
            if !manifest.is_file() {
                return Err(Error::MissingInput(format!(
                    "manifest not found at {}",
                    manifest.display()
                )));
            }
            let records = read_manifest(&manifest)?;
            let collection = collect_first_divergences(&p, &records, budget)?;
            write_events(
                &out,
                &EventsHeader {
                    pt_checkpoint: sha256_file(&pair.pt)?,
                    it_checkpoint: sha256_file(&pair.it)?,
                    seed: Some(seed),
                    budget,
                },
                &collection.events,
            )?;
            println!(
                "{} events, {} exclusions -> {}",
                collection.events.len(),
                collection.exclusions.len(),
                out.display()
            );
        }
        Command::Factorial {
            pair,
            events,
            readout,
            bootstrap,
            seed,
            out,
        } => {
            let p = pair.load()?;
            let events = load_events(&events)?;
            let results = score_factorial(&p, &events, readout.into())?;
            let means = CellMeans::from_results(&results)
                .ok_or_else(|| Error::NoResults("no events scored".into()))?;
            let boot =
                cluster_bootstrap(&results.clustered_interactions(), bootstrap, seed, 0.95)?;
            write_json(
                &out,
                &serde_json::json!({
                    "n_events": results.cells.len(),
                    "n_dropped": results.dropped.len(),
                    "cells": results.cells,
                    "cell_means": means,
                    "scale_conversions": scale_conversions(&means),
                    "interaction_bootstrap": boot,
                }),
            )?;
            println!(
                "interaction {:.4} [{:.4}, {:.4}] over {} events -> {}",
                boot.mean,
                boot.ci_lo,
                boot.ci_hi,
                results.cells.len(),
                out.display()
            );
        }
        Command::Controls {
            pair,
            events,
            readout,
            seed,
            draws,
            out,
        } => {
            let p = pair.load()?;
            let events = load_events(&events)?;
            let readout: Readout = readout.into();
            write_json(
                &out,
                &serde_json::json!({
                    "interpolation": interpolation_sweep(&p, &events, &DEFAULT_ALPHAS, readout)?,
                    "signed_permutation":
                        signed_permutation_null(&p, &events, readout, seed, draws)?,
                    "commitment": pre_late_commitment(&p, &events, readout)?,
                }),
            )?;
            println!("controls -> {}", out.display());
        }
        Command::BridgeContinuation {
            pair,
            events,
            horizons,
            variant,
            readout,
            seed,
            out,
        } => {
            let p = pair.load()?;
            let events = load_events(&events)?;
            let report = constrained_continuation(
                &p,
                &events,
                &horizons,
                variant.into(),
                readout.into(),
                seed,
            )?;
            write_json(&out, &report)?;
            println!("continuation bridge -> {}", out.display());
        }
        Command::BridgeForced {
            pair,
            events,
            manifest,
            budget,
            bootstrap,
            seed,
            out,
        } => {
            let p = pair.load()?;
            let events = load_events(&events)?;
            let records = read_manifest(&manifest)?;
            let report = forced_token_bridge(
                &p,
                &events,
                &records,
                budget,
                exact_substring_validator,
                bootstrap,
                seed,
            )?;
            write_json(&out, &report)?;
            println!("forced-token bridge -> {}", out.display());
        }
        Command::CrosscoderTrain {
            pair,
            events,
            layer,
            features,
            k,
            lr,
            steps,
            batch_size,
            seed,
            out,
        } => {
            let p = pair.load()?;
            let events = load_events(&events)?;
            let layer = layer.unwrap_or(p.boundary());
            let dumps = collect_paired_dumps(&p, &events, layer)?;
            let cfg = TrainConfig {
                n_features: features,
                k,
                lr,
                steps,
                batch_size,
                seed,
                holdout_stride: 5,
            };
            let (model, metrics) = train_crosscoder(&dumps, &cfg)?;
            save_crosscoder(&out, &model)?;
            let metrics_path = out.with_extension("metrics.json");
            write_json(
                &metrics_path,
                &serde_json::json!({ "layer": layer, "train": cfg, "metrics": metrics }),
            )?;
            println!(
                "VE pt {:.3} / it {:.3}, L0 {:.2} -> {} (+ {})",
                metrics.ve_pt,
                metrics.ve_it,
                metrics.mean_l0,
                out.display(),
                metrics_path.display()
            );
        }
        Command::CrosscoderAnalyze {
            pair,
            events,
            crosscoder,
            top,
            readout,
            out,
        } => {
            let p = pair.load()?;
            let events = load_events(&events)?;
            if !crosscoder.is_file() {
                return Err(Error::MissingInput(format!(
                    "crosscoder not found at {}",
                    crosscoder.display()
                )));
            }
            let model = load_crosscoder(&crosscoder)?;
            let readout: Readout = readout.into();
            let ranked = rank_features_causal(&model, &p, &events, readout, true)?;
            let top_set: Vec<usize> = ranked
                .scores
                .iter()
                .filter(|s| s.score > 0.0)
                .take(top)
                .map(|s| s.feature)
                .collect();
            let mediation = if top_set.is_empty() {
                None
            } else {
                let set = FeatureSet::new(top_set.clone(), Selection::CausalTopk, model.n_features)?;
                Some(mediation_drop(&model, &p, &events, &set, readout)?)
            };
            write_json(
                &out,
                &serde_json::json!({
                    "scores": ranked.scores,
                    "top_features": top_set,
                    "mediation": mediation,
                }),
            )?;
            println!("crosscoder analysis -> {}", out.display());
        }
        Command::Closure {
            pair,
            events,
            ranks,
            include_mean,
            readout,
            seed,
            out,
        } => {
            let p = pair.load()?;
            let events = load_events(&events)?;
            let (train, held) = split_events_by_cluster(&events);
            if train.is_empty() || held.is_empty() {
                return Err(Error::NoResults(
                    "closure needs events in at least two clusters".into(),
                ));
            }
            let sub = fit_boundary_pca(&p, &train)?;
            save_subspace(&out.with_extension("xpca"), &sub)?;
            let mut results = Vec::new();
            for &rank in &ranks {
                for control in [
                    ClosureControl::None,
                    ClosureControl::GaussianFull,
                    ClosureControl::FullDelta,
                ] {
                    results.push(closure_test(
                        &p,
                        &sub,
                        &held,
                        rank,
                        include_mean,
                        control,
                        readout.into(),
                        seed,
                    )?);
                }
            }
            write_json(&out, &serde_json::json!({ "results": results }))?;
            println!("closure -> {}", out.display());
        }
        Command::StageSweep {
            pt,
            it,
            stage,
            events,
            readout,
            out,
        } => {
            let base = load_existing(&pt)?;
            let final_cp = load_existing(&it)?;
            let events = load_events(&events)?;
            let mut stages = Vec::new();
            for spec in &stage {
                let (name, path) = spec.split_once('=').ok_or_else(|| {
                    Error::InvalidSpec(format!("stage `{spec}` is not name=path"))
                })?;
                stages.push((name.to_string(), load_existing(&PathBuf::from(path))?));
            }
            let rows = stage_sweep(&base, &final_cp, &stages, &events, readout.into())?;
            write_json(&out, &serde_json::json!({ "rows": rows }))?;
            println!("stage sweep ({} stages) -> {}", stages.len(), out.display());
        }
        Command::Report { out } => {
            let report = emit_report(&out)?;
            println!(
                "report.json for {} events -> {}",
                report.n_events,
                out.display()
            );
        }
        Command::Run { config, out } => {
            if !config.is_file() {
                return Err(Error::MissingInput(format!(
                    "config not found at {}",
                    config.display()
                )));
            }
            let cfg: PipelineConfig = serde_json::from_slice(&std::fs::read(&config)?)?;
            run_pipeline(&cfg, &out)?;
            println!("run directory -> {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::MissingInput(_) | Error::Io(_) => 3,
        Error::NonFiniteLoss { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
