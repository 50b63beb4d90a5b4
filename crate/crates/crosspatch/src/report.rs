//! Table- and figure-ready report emission from a completed run directory.
//!
//! `emit_report` is a pure function of the run directory's contents: it
//! reads the factorial artifact (required) plus whichever optional stage
//! artifacts exist, and writes a single `report.json` in the shape of the
//! four-cell effect summary — cell means, late effects, the interaction with
//! its cluster-bootstrap CI, scale conversions, and the per-family table
//! with its family-balanced aggregate — alongside flat CSVs with a stable
//! column order. Sections whose stage never ran are omitted entirely rather
//! than emitted as nulls, so downstream consumers can key on presence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorial::{scale_conversions, CellMeans, Readout, ScaleConversions};
use crate::pipeline::{
    read_json, ArtifactHeader, BridgesArtifact, ClosureArtifact, ControlsArtifact,
    CrosscoderArtifact, FactorialArtifact, RunMeta,
};
use crate::stats::{family_balanced_mean, family_means, BootstrapSummary, FamilyBalance};

/// One per-family row of the effect table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyRow {
    pub family: String,
    pub interaction: f64,
    pub n_events: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySection {
    pub rows: Vec<FamilyRow>,
    pub balance: FamilyBalance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlsSection {
    pub interpolation_slope: f64,
    pub interpolation_intercept: f64,
    pub signed_permutation_ratio: Option<f64>,
    pub commitment_mean_interaction_uncommitted: Option<f64>,
    pub commitment_n_uncommitted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeHorizonRow {
    pub variant: String,
    pub horizon: usize,
    pub n_events: usize,
    pub mean_interaction: f64,
    pub c0_survivor_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrosscoderSection {
    pub layer: usize,
    pub ve_pt: f64,
    pub ve_it: f64,
    pub mean_l0: f64,
    pub alive_fraction: f64,
    pub gate_passed: bool,
    pub n_top_features: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosureRow {
    pub boundary: usize,
    pub rank: usize,
    pub control: String,
    pub include_mean: bool,
    pub floor_margin: f64,
    pub native_margin: f64,
    pub rescued_margin: f64,
    pub closure_fraction: f64,
    pub degenerate_denominator: bool,
}

/// The emitted `report.json` document.
#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub header: ArtifactHeader,
    pub readout: Readout,
    pub n_events: usize,
    pub n_dropped: usize,
    pub four_cell_means: CellMeans,
    pub scale_conversions: ScaleConversions,
    pub interaction: BootstrapSummary,
    pub families: FamilySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<ControlsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridges: Option<Vec<BridgeHorizonRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crosscoder: Option<CrosscoderSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closure: Option<Vec<ClosureRow>>,
}

fn family_section(factorial: &FactorialArtifact) -> Result<FamilySection> {
    let values: Vec<(String, f64)> = factorial
        .cells
        .iter()
        .map(|c| (c.family.clone(), c.interaction))
        .collect();
    let means = family_means(&values);
    let rows: Vec<FamilyRow> = means
        .iter()
        .map(|(family, interaction)| FamilyRow {
            family: family.clone(),
            interaction: *interaction,
            n_events: factorial.cells.iter().filter(|c| &c.family == family).count(),
        })
        .collect();
    let balance = family_balanced_mean(&means.iter().map(|(_, m)| *m).collect::<Vec<_>>())?;
    Ok(FamilySection { rows, balance })
}

fn write_text(path: &Path, text: String) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Build and write `report.json` plus the flat CSV tables. Requires the
/// factorial artifact; all other sections are optional.
pub fn emit_report(run_dir: &Path) -> Result<Report> {
    let meta: RunMeta = read_json(&run_dir.join("run.json"))?;
    let factorial_path = run_dir.join("factorial.json");
    if !factorial_path.is_file() {
        return Err(Error::MissingInput(format!(
            "factorial artifact missing from {}",
            run_dir.display()
        )));
    }
    let factorial: FactorialArtifact = read_json(&factorial_path)?;
    if factorial.cells.is_empty() {
        return Err(Error::NoResults("factorial artifact has no cells".into()));
    }

    let controls = run_dir
        .join("controls.json")
        .is_file()
        .then(|| -> Result<ControlsSection> {
            let c: ControlsArtifact = read_json(&run_dir.join("controls.json"))?;
            Ok(ControlsSection {
                interpolation_slope: c.interpolation.slope,
                interpolation_intercept: c.interpolation.intercept,
                signed_permutation_ratio: c.signed_permutation.ratio,
                commitment_mean_interaction_uncommitted: c
                    .commitment
                    .mean_interaction_uncommitted,
                commitment_n_uncommitted: c.commitment.n_uncommitted,
            })
        })
        .transpose()?;

    let bridges = run_dir
        .join("bridges.json")
        .is_file()
        .then(|| -> Result<Vec<BridgeHorizonRow>> {
            let b: BridgesArtifact = read_json(&run_dir.join("bridges.json"))?;
            let mut rows = Vec::new();
            for (variant, report) in [
                ("standard", &b.continuation_standard),
                ("shuffled_tail", &b.continuation_shuffled),
            ] {
                for r in &report.rows {
                    rows.push(BridgeHorizonRow {
                        variant: variant.into(),
                        horizon: r.horizon,
                        n_events: r.n_events,
                        mean_interaction: r.mean_interaction,
                        c0_survivor_mean: r.c0_survivor_mean,
                    });
                }
            }
            Ok(rows)
        })
        .transpose()?;

    let crosscoder = run_dir
        .join("crosscoder.json")
        .is_file()
        .then(|| -> Result<CrosscoderSection> {
            let c: CrosscoderArtifact = read_json(&run_dir.join("crosscoder.json"))?;
            Ok(CrosscoderSection {
                layer: c.layer,
                ve_pt: c.metrics.ve_pt,
                ve_it: c.metrics.ve_it,
                mean_l0: c.metrics.mean_l0,
                alive_fraction: c.metrics.alive_fraction,
                gate_passed: c.gate.passed,
                n_top_features: c.top_features.len(),
            })
        })
        .transpose()?;

    let closure = run_dir
        .join("closure.json")
        .is_file()
        .then(|| -> Result<Vec<ClosureRow>> {
            let c: ClosureArtifact = read_json(&run_dir.join("closure.json"))?;
            Ok(c.results
                .iter()
                .map(|r| ClosureRow {
                    boundary: r.boundary,
                    rank: r.rank,
                    control: r.control.label().into(),
                    include_mean: r.include_mean,
                    floor_margin: r.floor_margin,
                    native_margin: r.native_margin,
                    rescued_margin: r.rescued_margin,
                    closure_fraction: r.closure_fraction,
                    degenerate_denominator: r.degenerate_denominator,
                })
                .collect())
        })
        .transpose()?;

    let report = Report {
        header: meta.header,
        readout: factorial.readout,
        n_events: factorial.n_events,
        n_dropped: factorial.n_dropped,
        four_cell_means: factorial.cell_means,
        scale_conversions: scale_conversions(&factorial.cell_means),
        interaction: factorial.interaction_bootstrap.clone(),
        families: family_section(&factorial)?,
        controls,
        bridges,
        crosscoder,
        closure,
    };

    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    fs::write(run_dir.join("report.json"), bytes)?;

    // Flat tables, fixed column order.
    let m = &report.four_cell_means;
    let mut cells_csv = String::from("cell,margin\n");
    for (name, v) in [
        ("y_pp", m.y_pp),
        ("y_pi", m.y_pi),
        ("y_ip", m.y_ip),
        ("y_ii", m.y_ii),
    ] {
        writeln!(cells_csv, "{name},{v}").unwrap();
    }
    write_text(&run_dir.join("report_four_cell.csv"), cells_csv)?;

    let mut fam_csv = String::from("family,interaction,n_events\n");
    for row in &report.families.rows {
        writeln!(fam_csv, "{},{},{}", row.family, row.interaction, row.n_events).unwrap();
    }
    write_text(&run_dir.join("report_families.csv"), fam_csv)?;

    if let Some(rows) = &report.closure {
        let mut csv = String::from(
            "boundary,rank,control,include_mean,floor_margin,native_margin,rescued_margin,closure_fraction,degenerate_denominator\n",
        );
        for r in rows {
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                r.boundary,
                r.rank,
                r.control,
                r.include_mean,
                r.floor_margin,
                r.native_margin,
                r.rescued_margin,
                r.closure_fraction,
                r.degenerate_denominator
            )
            .unwrap();
        }
        write_text(&run_dir.join("closure.csv"), csv)?;
    }

    Ok(report)
}
