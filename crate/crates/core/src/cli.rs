//! Command-line surface: `optimize` runs one tuning experiment and persists
//! its run log, `compare` aggregates run logs into normalized tables, and
//! `sweep` runs the full settings x workloads x batch-sizes grid.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::domain::{ClusterSpec, WorkloadSpec};
use crate::fixtures::{self, FixtureError};
use crate::optimizer::{self, Method, OptError, OptRun};
use crate::report::{self, ReportError};
use crate::runlog::{self, RunContext, RunLogError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

pub const SEED_ENV: &str = "SGDTUNE_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    RunLog(#[from] RunLogError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Invalid(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Parser)]
#[command(
    name = "sgdtune",
    version,
    about = "Schedule tuner for distributed SGD"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one optimizer on one cluster/workload/batch and persist a run log.
    Optimize(OptimizeArgs),
    /// Aggregate run logs into comparison and convergence tables.
    Compare(CompareArgs),
    /// Run the full settings x workloads x batch grid, then compare.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Built-in setting (A, B or C).
    #[arg(long, conflicts_with = "cluster")]
    pub setting: Option<String>,
    /// Cluster fixture file (TOML).
    #[arg(long)]
    pub cluster: Option<PathBuf>,
    /// Built-in workload name or workload fixture file.
    #[arg(long)]
    pub workload: String,
    /// Batch size (inputs per iteration).
    #[arg(long)]
    pub batch: u64,
    /// bespoke | generic_gp | random | uniform_devices | uniform_gpus
    #[arg(long, default_value = "bespoke")]
    pub method: String,
    /// Evaluation budget (configurations measured).
    #[arg(long, default_value_t = 10)]
    pub budget: usize,
    /// Run seed; falls back to SGDTUNE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the run log and summary.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Directory holding *.jsonl run logs.
    #[arg(long)]
    pub runs: PathBuf,
    /// Where to write the CSV tables (defaults to the runs directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated methods to run.
    #[arg(long, value_delimiter = ',', default_value = "bespoke")]
    pub methods: Vec<String>,
    /// Comma-separated settings.
    #[arg(long, value_delimiter = ',', default_value = "A,B,C")]
    pub settings: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Evaluation budget per cell.
    #[arg(long, default_value_t = 10)]
    pub budget: usize,
    /// Output directory; run logs land in <out>/runs.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

fn resolve_scenario(
    setting: &Option<String>,
    cluster_path: &Option<PathBuf>,
    workload: &str,
    batch: u64,
) -> Result<(ClusterSpec, WorkloadSpec, String), CliError> {
    let (cluster, label) = match (setting, cluster_path) {
        (Some(s), None) => {
            let c = s
                .chars()
                .next()
                .filter(|_| s.len() == 1)
                .ok_or_else(|| CliError::Invalid(format!("bad setting {s}")))?;
            (fixtures::builtin_setting(c)?, s.to_ascii_uppercase())
        }
        (None, Some(path)) => (fixtures::load_cluster(path)?, "custom".to_string()),
        _ => {
            return Err(CliError::Invalid(
                "exactly one of --setting or --cluster is required".into(),
            ))
        }
    };
    let workload_spec = if fixtures::workload_names()
        .iter()
        .any(|n| n.eq_ignore_ascii_case(workload))
    {
        fixtures::builtin_workload(workload, batch)?
    } else if Path::new(workload).exists() {
        fixtures::load_workload(Path::new(workload), batch)?
    } else {
        return Err(CliError::Invalid(format!(
            "workload {workload} is neither a built-in name nor a file"
        )));
    };
    Ok((cluster, workload_spec, label))
}

fn run_stem(method: Method, setting: &str, workload: &str, batch: u64, seed: u64) -> String {
    format!(
        "{}_{}_{}_{}_s{}",
        method.name(),
        setting,
        workload,
        batch,
        seed
    )
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })
}

/// Runs one optimization and writes `<stem>.jsonl` and `<stem>.summary.json`
/// under `out`. Returns the run and its log path.
pub fn run_optimize(args: &OptimizeArgs) -> Result<(OptRun, PathBuf), CliError> {
    let (cluster, workload, label) =
        resolve_scenario(&args.setting, &args.cluster, &args.workload, args.batch)?;
    let method: Method = args.method.parse().map_err(CliError::Invalid)?;
    let seed = resolve_seed(args.seed);
    let run = optimizer::run_method(method, &cluster, &workload, args.budget, seed)?;

    ensure_dir(&args.out)?;
    let ctx = RunContext {
        setting: label.clone(),
        workload: workload.name.clone(),
        batch: args.batch,
    };
    let stem = run_stem(method, &label, &workload.name, args.batch, seed);
    let log_path = args.out.join(format!("{stem}.jsonl"));
    runlog::write_run_log(&log_path, &run, &ctx)?;
    runlog::write_summary(&args.out.join(format!("{stem}.summary.json")), &run, &ctx)?;
    Ok((run, log_path))
}

pub fn cmd_optimize(args: &OptimizeArgs) -> i32 {
    match run_optimize(args) {
        Ok((run, log_path)) => {
            println!(
                "{}: best {:.4} s after {} evaluations ({})",
                args.method,
                run.best(),
                run.trajectory.len(),
                run.best_config().map(|c| c.digest()).unwrap_or_default()
            );
            println!("run log: {}", log_path.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

pub fn cmd_compare(args: &CompareArgs) -> i32 {
    match run_compare(args) {
        Ok(table) => {
            print!("{table}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

pub fn run_compare(args: &CompareArgs) -> Result<String, CliError> {
    let runs = report::load_runs(&args.runs)?;
    let rep = report::compare(&runs);
    let out = args.out.clone().unwrap_or_else(|| args.runs.clone());
    ensure_dir(&out)?;
    rep.write_csvs(&out)?;
    Ok(rep.render_table())
}

/// One sweep cell: a (setting, workload, batch, method, seed) experiment.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub setting: String,
    pub workload: String,
    pub batch: u64,
    pub method: Method,
    pub seed: u64,
}

pub fn sweep_cells(args: &SweepArgs) -> Result<Vec<SweepCell>, CliError> {
    let mut methods = Vec::new();
    for m in &args.methods {
        methods.push(m.parse::<Method>().map_err(CliError::Invalid)?);
    }
    let mut cells = Vec::new();
    for setting in &args.settings {
        for name in fixtures::workload_names() {
            // The lowest power of two in range is also the range minimum.
            let probe = fixtures::builtin_workload(&name, {
                let w = fixtures::builtin_workload(&name, 0).err();
                match w {
                    Some(FixtureError::BatchOutOfRange { lo, .. }) => lo,
                    _ => unreachable!("builtin workloads declare ranges"),
                }
            })?;
            for batch in fixtures::batch_powers(&probe) {
                for &method in &methods {
                    for &seed in &args.seeds {
                        cells.push(SweepCell {
                            setting: setting.clone(),
                            workload: name.clone(),
                            batch,
                            method,
                            seed,
                        });
                    }
                }
            }
        }
    }
    Ok(cells)
}

pub fn cmd_sweep(args: &SweepArgs) -> i32 {
    let cells = match sweep_cells(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let runs_dir = args.out.join("runs");
    if let Err(e) = ensure_dir(&runs_dir) {
        eprintln!("error: {e}");
        return EXIT_INVALID;
    }

    let mut failures: Vec<(SweepCell, String)> = Vec::new();
    let mut done = BTreeSet::new();
    for cell in &cells {
        let stem = run_stem(
            cell.method,
            &cell.setting,
            &cell.workload,
            cell.batch,
            cell.seed,
        );
        let marker = runs_dir.join(format!("{stem}.summary.json"));
        if marker.exists() {
            // Completed by an earlier, possibly interrupted sweep.
            done.insert(stem);
            continue;
        }
        let cell_args = OptimizeArgs {
            setting: Some(cell.setting.clone()),
            cluster: None,
            workload: cell.workload.clone(),
            batch: cell.batch,
            method: cell.method.name().to_string(),
            budget: args.budget,
            seed: Some(cell.seed),
            out: runs_dir.clone(),
        };
        match run_optimize(&cell_args) {
            Ok((run, _)) => {
                println!(
                    "cell {} {} {} {} seed {}: best {:.4} s",
                    cell.setting,
                    cell.workload,
                    cell.batch,
                    cell.method.name(),
                    cell.seed,
                    run.best()
                );
            }
            Err(e) => {
                eprintln!(
                    "cell {} {} {} {} seed {} failed: {e}",
                    cell.setting,
                    cell.workload,
                    cell.batch,
                    cell.method.name(),
                    cell.seed
                );
                failures.push((cell.clone(), e.to_string()));
            }
        }
    }

    let compare_args = CompareArgs {
        runs: runs_dir,
        out: Some(args.out.clone()),
    };
    match run_compare(&compare_args) {
        Ok(table) => print!("{table}"),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_PARTIAL;
        }
    }
    if failures.is_empty() {
        EXIT_OK
    } else {
        eprintln!("{} of {} cells failed", failures.len(), cells.len());
        EXIT_PARTIAL
    }
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Optimize(args) => cmd_optimize(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    }
}
