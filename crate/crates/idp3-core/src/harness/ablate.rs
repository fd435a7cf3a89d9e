//! Ablation grids: train and evaluate every cell of
//! encoders × point budgets × horizons × data seeds, sharing datasets
//! between cells that consume the same collection settings.

use super::dataset::{collect_demos, CollectConfig, Dataset};
use super::eval::{evaluate, EvalConfig};
use super::manifest::RunManifest;
use super::train::train;
use super::HarnessError;
use crate::encoders::EncoderVariant;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct AblationGrid {
    /// Every non-swept knob (epochs, widths, seeds...) comes from here.
    pub base: RunManifest,
    pub encoders: Vec<EncoderVariant>,
    pub points: Vec<usize>,
    pub horizons: Vec<usize>,
    pub data_seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn cells(&self) -> usize {
        self.encoders.len() * self.points.len() * self.horizons.len() * self.data_seeds.len()
    }

    /// Parses a grid manifest: ordinary manifest keys plus the sweep axes
    /// `grid_encoders`, `grid_points`, `grid_horizons`, `grid_data_seeds`
    /// (comma-separated). A missing axis degenerates to the base value, so
    /// a plain run manifest is a valid 1-cell grid.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        fn values<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, HarnessError>
        where
            T::Err: std::fmt::Display,
        {
            v.split(',')
                .map(|p| {
                    p.trim().parse::<T>().map_err(|e| {
                        HarnessError::Manifest(format!("{key}: bad entry {:?}: {e}", p.trim()))
                    })
                })
                .collect()
        }
        let mut encoders = None;
        let mut points = None;
        let mut horizons = None;
        let mut data_seeds = None;
        let mut base_lines = String::new();
        for raw in text.lines() {
            let line = raw.trim();
            let key = line.split_once('=').map(|(k, _)| k.trim());
            let v = line.split_once('=').map(|(_, v)| v.trim()).unwrap_or("");
            match key {
                Some("grid_encoders") => encoders = Some(values("grid_encoders", v)?),
                Some("grid_points") => points = Some(values("grid_points", v)?),
                Some("grid_horizons") => horizons = Some(values("grid_horizons", v)?),
                Some("grid_data_seeds") => data_seeds = Some(values("grid_data_seeds", v)?),
                _ => {
                    base_lines.push_str(raw);
                    base_lines.push('\n');
                }
            }
        }
        let base = RunManifest::parse(&base_lines)?;
        Ok(Self {
            encoders: encoders.unwrap_or_else(|| vec![base.encoder]),
            points: points.unwrap_or_else(|| vec![base.target_points]),
            horizons: horizons.unwrap_or_else(|| vec![base.h_pred]),
            data_seeds: data_seeds.unwrap_or_else(|| vec![base.data_seed]),
            base,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationRow {
    pub manifest_hash: String,
    pub variant: String,
    pub points: usize,
    pub h_pred: usize,
    pub successes: u64,
    pub attempts: u64,
    pub episodes: usize,
}

/// The manifest for one grid cell. The executed prefix tracks the horizon
/// (half of it, at least one step) so horizon sweeps compare like with like
/// instead of replanning H=4 and H=16 at the same cadence.
pub(crate) fn cell_manifest(
    base: &RunManifest,
    encoder: EncoderVariant,
    points: usize,
    h_pred: usize,
    data_seed: u64,
) -> RunManifest {
    RunManifest {
        encoder,
        target_points: points,
        h_pred,
        h_act: (h_pred / 2).max(1),
        data_seed,
        ..base.clone()
    }
}

/// Runs the full cartesian grid. Cells sharing (data seed, point budget)
/// reuse one collected dataset; every cell trains its own policy and is
/// evaluated unperturbed per its manifest. Artifacts land under `out_dir`,
/// prefixed by each cell's manifest hash.
pub fn run_ablation(grid: &AblationGrid, out_dir: &Path) -> Result<Vec<AblationRow>, HarnessError> {
    if grid.cells() == 0 {
        return Err(HarnessError::Manifest("ablation grid has an empty axis".into()));
    }
    let include_image = grid.encoders.contains(&EncoderVariant::ImageBaseline);
    let mut datasets: HashMap<(u64, usize), Dataset> = HashMap::new();
    let mut rows = Vec::with_capacity(grid.cells());
    for &encoder in &grid.encoders {
        for &points in &grid.points {
            for &h_pred in &grid.horizons {
                for &data_seed in &grid.data_seeds {
                    let cell = cell_manifest(&grid.base, encoder, points, h_pred, data_seed);
                    cell.validate()?;
                    let dataset = match datasets.entry((data_seed, points)) {
                        std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                        std::collections::hash_map::Entry::Vacant(e) => {
                            let cc = CollectConfig::from_manifest(&cell, include_image);
                            e.insert(collect_demos(&cc)?)
                        }
                    };
                    let outcome = train(dataset, &cell, out_dir)?;
                    let report = evaluate(&outcome.policy, &EvalConfig::from_manifest(&cell))?;
                    rows.push(AblationRow {
                        manifest_hash: cell.short_hash(),
                        variant: encoder.to_string(),
                        points,
                        h_pred,
                        successes: report.successes,
                        attempts: report.attempts,
                        episodes: report.episodes,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("manifest_hash,variant,points,h_pred,successes,attempts,episodes\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.manifest_hash, r.variant, r.points, r.h_pred, r.successes, r.attempts, r.episodes
        )
        .expect("writing to a String cannot fail");
    }
    out
}
