//! Comparison reporting: per-experiment best objectives, time per input
//! normalized within each (setting, workload) group, and per-iteration
//! convergence curves, emitted as CSV.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::optimizer::OptRun;
use crate::runlog::{self, RunHeader, RunLogError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no run logs found under {0}")]
    EmptyRunSet(String),
    #[error(transparent)]
    RunLog(#[from] RunLogError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub setting: String,
    pub workload: String,
    pub batch: u64,
    pub method: String,
    pub runs: usize,
    pub best_objective_s: f64,
    pub time_per_input_s: f64,
    /// time per input divided by the best within the (setting, workload)
    /// group; the group minimum is exactly 1.0.
    pub normalized: f64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupFactor {
    pub setting: String,
    pub workload: String,
    /// best time per input in the group, in milliseconds
    pub best_time_per_input_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergencePoint {
    pub setting: String,
    pub workload: String,
    pub batch: u64,
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
    pub best_so_far_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub factors: Vec<GroupFactor>,
    pub convergence: Vec<ConvergencePoint>,
}

/// Reads every `*.jsonl` run log under `dir` (non-recursive).
pub fn load_runs(dir: &Path) -> Result<Vec<(RunHeader, OptRun)>, ReportError> {
    let entries = std::fs::read_dir(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut runs = Vec::new();
    for path in paths {
        runs.push(runlog::read_run_log(&path)?);
    }
    if runs.is_empty() {
        return Err(ReportError::EmptyRunSet(dir.display().to_string()));
    }
    Ok(runs)
}

/// Builds the comparison report over parsed runs.
pub fn compare(runs: &[(RunHeader, OptRun)]) -> CompareReport {
    // Best run per (setting, workload, batch, method) across seeds.
    #[derive(Default)]
    struct Cell {
        best: f64,
        runs: usize,
        workers: usize,
    }
    let mut cells: BTreeMap<(String, String, u64, String), Cell> = BTreeMap::new();
    let mut convergence = Vec::new();
    for (header, run) in runs {
        let key = (
            header.setting.clone(),
            header.workload.clone(),
            header.batch,
            header.method.name().to_string(),
        );
        let cell = cells.entry(key).or_insert(Cell {
            best: f64::INFINITY,
            runs: 0,
            workers: 0,
        });
        cell.runs += 1;
        let best = run.best();
        if best < cell.best {
            cell.best = best;
            cell.workers = run.best_config().map_or(0, |c| c.worker_count());
        }
        for p in &run.trajectory {
            convergence.push(ConvergencePoint {
                setting: header.setting.clone(),
                workload: header.workload.clone(),
                batch: header.batch,
                method: header.method.name().to_string(),
                seed: header.seed,
                iteration: p.iteration,
                best_so_far_s: p.best_so_far,
            });
        }
    }

    let mut group_best: BTreeMap<(String, String), f64> = BTreeMap::new();
    for ((setting, workload, batch, _), cell) in &cells {
        let tpi = cell.best / *batch as f64;
        let entry = group_best
            .entry((setting.clone(), workload.clone()))
            .or_insert(f64::INFINITY);
        if tpi < *entry {
            *entry = tpi;
        }
    }

    let rows = cells
        .iter()
        .map(|((setting, workload, batch, method), cell)| {
            let tpi = cell.best / *batch as f64;
            let denom = group_best[&(setting.clone(), workload.clone())];
            CompareRow {
                setting: setting.clone(),
                workload: workload.clone(),
                batch: *batch,
                method: method.clone(),
                runs: cell.runs,
                best_objective_s: cell.best,
                time_per_input_s: tpi,
                normalized: tpi / denom,
                workers: cell.workers,
            }
        })
        .collect();
    let factors = group_best
        .into_iter()
        .map(|((setting, workload), tpi)| GroupFactor {
            setting,
            workload,
            best_time_per_input_ms: tpi * 1000.0,
        })
        .collect();
    CompareReport {
        rows,
        factors,
        convergence,
    }
}

impl CompareReport {
    pub fn compare_csv(&self) -> String {
        let mut out = String::from(
            "setting,workload,batch,method,runs,best_objective_s,time_per_input_s,normalized,workers\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.setting,
                r.workload,
                r.batch,
                r.method,
                r.runs,
                r.best_objective_s,
                r.time_per_input_s,
                r.normalized,
                r.workers
            ));
        }
        out
    }

    pub fn factors_csv(&self) -> String {
        let mut out = String::from("setting,workload,best_time_per_input_ms\n");
        for f in &self.factors {
            out.push_str(&format!(
                "{},{},{}\n",
                f.setting, f.workload, f.best_time_per_input_ms
            ));
        }
        out
    }

    pub fn convergence_csv(&self) -> String {
        let mut out = String::from("setting,workload,batch,method,seed,iteration,best_so_far_s\n");
        for c in &self.convergence {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.setting, c.workload, c.batch, c.method, c.seed, c.iteration, c.best_so_far_s
            ));
        }
        out
    }

    /// Plain-text table for stdout.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:<10} {:>7} {:<15} {:>5} {:>12} {:>14} {:>10} {:>7}\n",
            "setting",
            "workload",
            "batch",
            "method",
            "runs",
            "best_obj_s",
            "time_per_in_s",
            "normalized",
            "workers"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:<10} {:>7} {:<15} {:>5} {:>12.4} {:>14.6} {:>10.3} {:>7}\n",
                r.setting,
                r.workload,
                r.batch,
                r.method,
                r.runs,
                r.best_objective_s,
                r.time_per_input_s,
                r.normalized,
                r.workers
            ));
        }
        for f in &self.factors {
            out.push_str(&format!(
                "group {} / {}: best time per input {:.3} ms\n",
                f.setting, f.workload, f.best_time_per_input_ms
            ));
        }
        out
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<(), ReportError> {
        let io = |path: &Path| {
            let p = path.display().to_string();
            move |source| ReportError::Io {
                path: p.clone(),
                source,
            }
        };
        let compare_path = dir.join("compare.csv");
        std::fs::write(&compare_path, self.compare_csv()).map_err(io(&compare_path))?;
        let factors_path = dir.join("normalization.csv");
        std::fs::write(&factors_path, self.factors_csv()).map_err(io(&factors_path))?;
        let conv_path = dir.join("convergence.csv");
        std::fs::write(&conv_path, self.convergence_csv()).map_err(io(&conv_path))?;
        Ok(())
    }
}
