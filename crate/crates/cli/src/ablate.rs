//! `ablate`: cartesian grid of training runs plus a summary CSV.
//!
//! A grid file uses the config grammar. A value with commas is an axis:
//!
//! ```text
//! run.preset = litepo
//! data.path = easy.jsonl
//! loss.eps_high = 0.20, 0.28
//! adv.norm = group, group_mean_only
//! ```

use crate::report::report;
use crate::run::train;
use crate::{claim_output, CmdResult, Failure};
use rayon::prelude::*;
use rltricks::config::{parse_kv, TrainConfig};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationGrid {
    pub base: Vec<(String, String)>,
    pub axes: Vec<(String, Vec<String>)>,
}

impl AblationGrid {
    pub fn parse(text: &str) -> CmdResult<Self> {
        let mut grid = Self::default();
        for (k, v) in parse_kv(text)? {
            if v.contains(',') {
                let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
                if values.iter().any(String::is_empty) {
                    return Err(Failure::validation(format!("axis {k} has an empty value")));
                }
                if grid.axes.iter().any(|(a, _)| *a == k) {
                    return Err(Failure::validation(format!("axis {k} given twice")));
                }
                grid.axes.push((k, values));
            } else {
                grid.base.push((k, v));
            }
        }
        Ok(grid)
    }

    /// Resolves every cell, failing on the first invalid config or repeated
    /// cell name.
    pub fn cells(&self, overrides: &[(String, String)]) -> CmdResult<Vec<Cell>> {
        let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let mut seen = BTreeSet::new();
        let mut cells = Vec::with_capacity(combos.len());
        for combo in combos {
            let mut doc = self.base.clone();
            doc.extend(combo.iter().cloned());
            let mut cfg = TrainConfig::resolve(None, &doc, overrides)?;
            let name = if combo.is_empty() {
                cfg.name.clone()
            } else {
                combo
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join("+")
                    .replace(['/', '\\'], "_")
            };
            if !seen.insert(name.clone()) {
                return Err(Failure::validation(format!("duplicate cell name {name:?}")));
            }
            cfg.name = name.clone();
            cfg.validate()?;
            cells.push(Cell { name, config: cfg });
        }
        Ok(cells)
    }
}

/// Runs every cell under `out` and writes `summary.csv`. Returns the cell
/// directories in grid order.
pub fn ablate(grid_file: &Path, out: &Path, overrides: &[(String, String)], force: bool) -> CmdResult<Vec<PathBuf>> {
    let text = fs::read_to_string(grid_file)
        .map_err(|e| Failure::validation(format!("reading {}: {e}", grid_file.display())))?;
    let cells = AblationGrid::parse(&text)?.cells(overrides)?;
    claim_output(out, force)?;
    fs::create_dir_all(out)?;
    let dirs: Vec<PathBuf> = cells.iter().map(|c| out.join(&c.name)).collect();
    cells
        .par_iter()
        .zip(&dirs)
        .map(|(c, d)| train(&c.config, d, false))
        .collect::<CmdResult<Vec<()>>>()?;
    let summary = fs::File::create(out.join(SUMMARY_FILE))?;
    report(&dirs, summary)?;
    Ok(dirs)
}
