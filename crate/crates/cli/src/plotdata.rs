//! Long-format (episode, metric, value, algo) export of run metrics.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dlpo_core::trainer::read_metrics_csv;
use dlpo_core::MetricsRow;
use serde::{Deserialize, Serialize};

pub const METRICS: [&str; 6] = ["mean_reward", "mean_eval", "mean_ter", "shaped_mean", "penalty_mean", "grad_norm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub episode: usize,
    pub metric: String,
    pub value: f64,
    pub algo: String,
}

pub fn tidy(rows: &[MetricsRow]) -> Vec<TidyRow> {
    rows.iter()
        .flat_map(|r| {
            let values = [r.mean_reward, r.mean_eval, r.mean_ter, r.shaped_mean, r.penalty_mean, r.grad_norm];
            METRICS.iter().zip(values).map(move |(m, value)| TidyRow {
                episode: r.episode,
                metric: m.to_string(),
                value,
                algo: r.algo.to_string(),
            })
        })
        .collect()
}

fn is_tidy(path: &Path) -> Result<bool> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(r.headers()?.iter().eq(["episode", "metric", "value", "algo"]))
}

fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("metrics.csv").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.csv").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        bail!("no metrics.csv in {} or its subdirectories", dir.display());
    }
    Ok(runs)
}

/// Reads a run directory, a directory of runs, or an existing long-format file.
pub fn collect(input: &Path) -> Result<Vec<TidyRow>> {
    if input.is_file() {
        if is_tidy(input)? {
            let mut r = csv::Reader::from_path(input)?;
            return r.deserialize().map(|row| row.map_err(anyhow::Error::from)).collect();
        }
        return Ok(tidy(&read_metrics_csv(input)?));
    }
    if !input.exists() {
        bail!("missing metrics input {}", input.display());
    }
    let mut out = Vec::new();
    for dir in run_dirs(input)? {
        out.extend(tidy(&read_metrics_csv(&dir.join("metrics.csv"))?));
    }
    Ok(out)
}

pub fn write(path: &Path, rows: &[TidyRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
