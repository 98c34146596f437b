//! Run-log persistence: line-delimited JSON, a header record followed by one
//! row per optimizer iteration, plus a one-object summary file. Re-parsing a
//! log reproduces the in-memory run exactly.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Configuration;
use crate::optimizer::{Method, OptRun, TrajectoryPoint};
use crate::simulator::Measurement;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunLogError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported schema version {0}")]
    Schema(u32),
}

/// Identifies the experiment a run belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub setting: String,
    pub workload: String,
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema_version: u32,
    pub kind: String,
    pub method: Method,
    pub setting: String,
    pub workload: String,
    pub batch: u64,
    pub seed: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RowRecord {
    schema_version: u32,
    kind: String,
    iteration: usize,
    objective_s: f64,
    best_so_far_s: f64,
    config_digest: String,
    wall_time_s: f64,
    model_digest: String,
    config: Configuration,
    measurement: Measurement,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunLogError + '_ {
    move |source| RunLogError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> RunLogError + '_ {
    move |e| RunLogError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn header_for(run: &OptRun, ctx: &RunContext) -> RunHeader {
    RunHeader {
        schema_version: SCHEMA_VERSION,
        kind: "header".into(),
        method: run.method,
        setting: ctx.setting.clone(),
        workload: ctx.workload.clone(),
        batch: ctx.batch,
        seed: run.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
}

/// Writes the line-delimited run log.
pub fn write_run_log(path: &Path, run: &OptRun, ctx: &RunContext) -> Result<(), RunLogError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    let header = header_for(run, ctx);
    let mut text = serde_json::to_string(&header).map_err(json_err(path))?;
    text.push('\n');
    for p in &run.trajectory {
        let row = RowRecord {
            schema_version: SCHEMA_VERSION,
            kind: "row".into(),
            iteration: p.iteration,
            objective_s: p.measurement.objective,
            best_so_far_s: p.best_so_far,
            config_digest: p.config.digest(),
            wall_time_s: p.wall_time_s,
            model_digest: p.model_digest.clone(),
            config: p.config.clone(),
            measurement: p.measurement.clone(),
        };
        text.push_str(&serde_json::to_string(&row).map_err(json_err(path))?);
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Parses a run log back into the header and the run it recorded.
pub fn read_run_log(path: &Path) -> Result<(RunHeader, OptRun), RunLogError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| RunLogError::Parse {
            path: path.display().to_string(),
            message: "empty run log".into(),
        })?
        .map_err(io_err(path))?;
    let header: RunHeader = serde_json::from_str(&first).map_err(json_err(path))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(RunLogError::Schema(header.schema_version));
    }
    let mut trajectory = Vec::new();
    for line in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RowRecord = serde_json::from_str(&line).map_err(json_err(path))?;
        trajectory.push(TrajectoryPoint {
            iteration: row.iteration,
            config: row.config,
            measurement: row.measurement,
            best_so_far: row.best_so_far_s,
            wall_time_s: row.wall_time_s,
            model_digest: row.model_digest,
        });
    }
    Ok((
        header.clone(),
        OptRun {
            method: header.method,
            seed: header.seed,
            trajectory,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub method: Method,
    pub setting: String,
    pub workload: String,
    pub batch: u64,
    pub seed: u64,
    pub iterations: usize,
    pub best_objective_s: f64,
    pub best_config_digest: String,
    pub best_config: Option<Configuration>,
}

/// Writes the end-of-run summary; doubles as the sweep's done-marker.
pub fn write_summary(path: &Path, run: &OptRun, ctx: &RunContext) -> Result<(), RunLogError> {
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        method: run.method,
        setting: ctx.setting.clone(),
        workload: ctx.workload.clone(),
        batch: ctx.batch,
        seed: run.seed,
        iterations: run.trajectory.len(),
        best_objective_s: run.best(),
        best_config_digest: run.best_config().map(|c| c.digest()).unwrap_or_default(),
        best_config: run.best_config().cloned(),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(json_err(path))?;
    std::fs::write(path, text).map_err(io_err(path))
}
