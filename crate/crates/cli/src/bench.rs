use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;

use rcscme::harness::{evaluate_scene, format_table, summarize, SceneEvaluation};

use crate::config::Config;

pub const CSV_HEADER: &str = "seed,direction_deg,variant,iteration,sdr_improvement_db";

/// Runs ILRMA and both EM variants on every scene of the grid. Scenes run
/// concurrently; results keep grid order.
pub fn run(cfg: &Config) -> Result<Vec<SceneEvaluation>> {
    let grid = cfg.grid()?;
    let results = grid
        .scenes()
        .par_iter()
        .map(|scene| evaluate_scene(scene, &grid))
        .collect::<rcscme::Result<Vec<_>>>()?;
    Ok(results)
}

pub fn table(results: &[SceneEvaluation]) -> String {
    format_table(&summarize(results))
}

/// Per-iteration SDR improvement of every EM run.
pub fn write_curves(path: &Path, results: &[SceneEvaluation]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for e in results {
        for (variant, report) in &e.variants {
            for (k, v) in &report.per_iteration {
                out.push_str(&format!("{},{},{},{k},{v:.4}\n", e.scene.seed, e.scene.target_direction_deg, variant.name()));
            }
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
