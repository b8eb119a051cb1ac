//! On-disk run artifacts: a directory of plain structured-text files,
//! diffable and byte-reproducible.
//!
//! ```text
//! out/
//!   config.json        validated run configuration snapshot
//!   summary.json       strategy, dataset label, diagnostics
//!   pool.jsonl         one scored candidate per line
//!   demos.json         the selected demo set
//!   trace.json         per-step selection audit trail
//!   predictions.jsonl  one prediction per line, prompt included
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use usp_core::model::{DemoSet, RunConfig};
use usp_core::pipeline::{PoolRecord, PredictionRecord, RunArtifacts, RunDiagnostics, Strategy};
use usp_core::selection::SelectionTrace;
use usp_core::{Result, UspError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub dataset: String,
    pub diagnostics: RunDiagnostics,
}

/// A fully loaded artifact directory.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub summary: RunSummary,
    pub pool: Vec<PoolRecord>,
    pub demoset: DemoSet,
    pub traces: Vec<SelectionTrace>,
    pub predictions: Vec<PredictionRecord>,
}

fn corrupt(path: &Path, reason: impl std::fmt::Display) -> UspError {
    UspError::CorruptArtifact(format!("{}: {reason}", path.display()))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| corrupt(path, e))
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut line = serde_json::to_string(value).expect("artifact types serialize");
    line.push('\n');
    line
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(json_line).collect()
}

pub fn write_artifacts(dir: &Path, artifacts: &RunArtifacts, dataset_label: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| corrupt(dir, e))?;
    write_file(dir.join("config.json").as_path(), &json_line(&artifacts.config))?;
    let summary = RunSummary {
        strategy: artifacts.strategy,
        dataset: dataset_label.to_string(),
        diagnostics: artifacts.diagnostics.clone(),
    };
    write_file(dir.join("summary.json").as_path(), &json_line(&summary))?;
    write_file(dir.join("pool.jsonl").as_path(), &jsonl(&artifacts.pool))?;
    write_file(dir.join("demos.json").as_path(), &json_line(&artifacts.demoset))?;
    write_file(dir.join("trace.json").as_path(), &json_line(&artifacts.traces))?;
    write_file(
        dir.join("predictions.jsonl").as_path(),
        &jsonl(&artifacts.predictions),
    )?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| corrupt(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let body = std::fs::read_to_string(path).map_err(|e| corrupt(path, e))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| serde_json::from_str(line).map_err(|e| corrupt(path, e)))
        .collect()
}

pub fn read_artifacts(dir: &Path) -> Result<StoredRun> {
    if !dir.is_dir() {
        return Err(corrupt(dir, "not a directory"));
    }
    Ok(StoredRun {
        dir: dir.to_path_buf(),
        config: read_json(&dir.join("config.json"))?,
        summary: read_json(&dir.join("summary.json"))?,
        pool: read_jsonl(&dir.join("pool.jsonl"))?,
        demoset: read_json(&dir.join("demos.json"))?,
        traces: read_json(&dir.join("trace.json"))?,
        predictions: read_jsonl(&dir.join("predictions.jsonl"))?,
    })
}
