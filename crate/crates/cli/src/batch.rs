//! Grids of runs over seeds, SER values and loudspeaker nonlinearities.

use std::collections::BTreeMap;
use std::path::Path;

use fdkf_core::audio_io::config::{RawConfig, RawNonlinearity};
use fdkf_core::audio_io::table::{format_optional, format_value, write_json, Table};
use fdkf_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, ErrorReport, Result};
use crate::run::{
    run_experiment, summary_cells, summary_columns, RunManifest, RunStatus, MANIFEST_FILE,
};

pub const BATCH_FILE: &str = "batch.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MEANS_FILE: &str = "summary_mean.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub seed: u64,
    pub ser_db: f64,
    pub nonlinearity: String,
    /// Run directory relative to the batch directory.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    #[serde(flatten)]
    pub cell: Cell,
    pub status: RunStatus,
    pub error: Option<ErrorReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub version: String,
    pub cells: Vec<CellOutcome>,
    pub summary: String,
    pub means: String,
    /// Filter name to the CSV of its ERLE trace averaged over cells.
    pub mean_erle: BTreeMap<String, String>,
}

fn nonlinearity_label(nl: &RawNonlinearity) -> String {
    match nl {
        RawNonlinearity::None => "none".into(),
        RawNonlinearity::Sef { alpha: Some(a) } => format!("sef{a}"),
        RawNonlinearity::Sef { alpha: None } => "sef".into(),
        RawNonlinearity::Sigmoid(_) => "sigmoid".into(),
    }
}

/// Cells in seed-major order with their configurations.
pub fn expand_grid(base: &RawConfig) -> Result<Vec<(Cell, RawConfig)>> {
    if base.input.is_some() {
        return Err(CliError::Usage(
            "batch needs a synthetic scenario, not input files".into(),
        ));
    }
    let grid = base.resolve()?.grid;
    let mut cells = Vec::with_capacity(grid.cells());
    for &seed in &grid.seeds {
        for &ser in &grid.ser_db {
            for nl in &grid.nonlinearity {
                let index = cells.len();
                let label = nonlinearity_label(nl);
                let mut raw = base.clone();
                raw.seed = Some(seed);
                raw.output_dir = None;
                let scenario = raw.scenario.get_or_insert_with(Default::default);
                scenario.ser_db = Some(ser);
                scenario.nonlinearity = Some(nl.clone());
                let cell = Cell {
                    index,
                    seed,
                    ser_db: ser,
                    nonlinearity: label.clone(),
                    dir: format!("cells/{index:03}_seed{seed}_ser{ser}_{label}"),
                };
                cells.push((cell, raw));
            }
        }
    }
    Ok(cells)
}

fn run_cell(cell: &Cell, raw: &RawConfig, dir: &Path) -> (CellOutcome, Option<RunManifest>) {
    let result = raw
        .resolve()
        .map_err(CliError::from)
        .and_then(|config| run_experiment(&config, &dir.join(&cell.dir)));
    match result {
        Ok(manifest) => (
            CellOutcome {
                cell: cell.clone(),
                status: RunStatus::Ok,
                error: None,
            },
            Some(manifest),
        ),
        Err(err) => {
            log::warn!("cell {} failed: {err}", cell.dir);
            (
                CellOutcome {
                    cell: cell.clone(),
                    status: RunStatus::Failed,
                    error: Some(err.report()),
                },
                None,
            )
        }
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn write_summary(outcomes: &[(CellOutcome, Option<RunManifest>)], dir: &Path) -> Result<()> {
    let mut header = vec!["cell", "seed", "ser_db", "nonlinearity", "status"];
    header.extend(summary_columns());
    let width = header.len();
    let mut table = Table::new(header);
    for (outcome, manifest) in outcomes {
        let c = &outcome.cell;
        let prefix = vec![
            c.index.to_string(),
            c.seed.to_string(),
            format_value(c.ser_db),
            c.nonlinearity.clone(),
            if outcome.status == RunStatus::Ok {
                "ok"
            } else {
                "failed"
            }
            .to_owned(),
        ];
        match manifest {
            Some(m) => {
                for f in &m.filters {
                    for s in &f.sections {
                        let mut row = prefix.clone();
                        row.extend(summary_cells(f, s));
                        table.push(row)?;
                    }
                }
            }
            None => {
                let mut row = prefix;
                row.resize(width, String::new());
                table.push(row)?;
            }
        }
    }
    table.write(dir.join(SUMMARY_FILE))?;
    Ok(())
}

/// Means over seeds for every (SER, nonlinearity, filter, section), plus
/// rows pooled over all cells.
fn write_means(outcomes: &[(CellOutcome, Option<RunManifest>)], dir: &Path) -> Result<()> {
    type Key = (String, String, String, usize, String);
    let mut groups: BTreeMap<Key, Vec<[Option<f64>; 6]>> = BTreeMap::new();
    for (outcome, manifest) in outcomes {
        let Some(m) = manifest else { continue };
        let c = &outcome.cell;
        for f in &m.filters {
            for s in &f.sections {
                let values = [
                    s.erle_mean,
                    s.erle_final,
                    s.misalignment_mean,
                    s.misalignment_final,
                    f.log_mse_db,
                    f.time_to_misalignment_s,
                ];
                for (ser, nl) in [
                    (format_value(c.ser_db), c.nonlinearity.clone()),
                    ("all".to_owned(), "all".to_owned()),
                ] {
                    groups
                        .entry((ser, nl, f.name.clone(), s.index, s.kind.to_string()))
                        .or_default()
                        .push(values);
                }
            }
        }
    }
    let mut header = vec![
        "ser_db",
        "nonlinearity",
        "filter",
        "section",
        "kind",
        "cells",
    ];
    header.extend(&summary_columns()[3..]);
    let mut table = Table::new(header);
    for ((ser, nl, filter, section, kind), rows) in &groups {
        let mut row = vec![
            ser.clone(),
            nl.clone(),
            filter.clone(),
            section.to_string(),
            kind.clone(),
            rows.len().to_string(),
        ];
        for col in 0..6 {
            row.push(format_optional(mean(rows.iter().map(|r| r[col]))));
        }
        table.push(row)?;
    }
    table.write(dir.join(MEANS_FILE))?;
    Ok(())
}

/// Average the emitted ERLE traces of each filter over successful cells.
fn write_mean_traces(
    outcomes: &[(CellOutcome, Option<RunManifest>)],
    dir: &Path,
) -> Result<BTreeMap<String, String>> {
    let mut sums: BTreeMap<String, (Table, Vec<f64>, usize)> = BTreeMap::new();
    for (outcome, manifest) in outcomes {
        let Some(m) = manifest else { continue };
        for f in &m.filters {
            let Some(file) = f.outputs.get("erle") else {
                continue;
            };
            let table = Table::read(dir.join(&outcome.cell.dir).join(file))?;
            let values: Vec<f64> = table
                .numeric_column("erle_db")?
                .into_iter()
                .flatten()
                .collect();
            match sums.get_mut(&f.name) {
                None => {
                    sums.insert(f.name.clone(), (table, values, 1));
                }
                Some((first, acc, n)) => {
                    if first.rows.len() != table.rows.len() {
                        return Err(Error::Shape {
                            context: "ERLE traces across cells",
                            expected: first.rows.len(),
                            actual: table.rows.len(),
                        }
                        .into());
                    }
                    acc.iter_mut().zip(&values).for_each(|(a, v)| *a += v);
                    *n += 1;
                }
            }
        }
    }
    let mut files = BTreeMap::new();
    for (name, (first, acc, n)) in sums {
        let mut table = Table::new(["sample", "time_s", "erle_db"]);
        for (row, sum) in first.rows.iter().zip(acc) {
            table.push(vec![
                row[0].clone(),
                row[1].clone(),
                format_value(sum / n as f64),
            ])?;
        }
        let file = format!("mean_erle_{name}.csv");
        table.write(dir.join(&file))?;
        files.insert(name, file);
    }
    Ok(files)
}

/// Run every grid cell (in parallel) below `dir`. Failed cells are
/// recorded and skipped; the batch itself only fails on I/O errors.
pub fn run_batch(base: &RawConfig, dir: &Path) -> Result<BatchManifest> {
    let cells = expand_grid(base)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let outcomes: Vec<(CellOutcome, Option<RunManifest>)> = cells
        .par_iter()
        .map(|(cell, raw)| run_cell(cell, raw, dir))
        .collect();

    write_summary(&outcomes, dir)?;
    write_means(&outcomes, dir)?;
    let mean_erle = write_mean_traces(&outcomes, dir)?;
    let manifest = BatchManifest {
        version: env!("CARGO_PKG_VERSION").to_owned(),
        cells: outcomes.into_iter().map(|(o, _)| o).collect(),
        summary: SUMMARY_FILE.to_owned(),
        means: MEANS_FILE.to_owned(),
        mean_erle,
    };
    write_json(&manifest, dir.join(BATCH_FILE))?;
    Ok(manifest)
}

/// Paths of the run manifests of all successful cells.
pub fn cell_manifests(batch: &BatchManifest, dir: &Path) -> Vec<std::path::PathBuf> {
    batch
        .cells
        .iter()
        .filter(|c| c.status == RunStatus::Ok)
        .map(|c| dir.join(&c.cell.dir).join(MANIFEST_FILE))
        .collect()
}
