//! Fixture ingestion: built-in reference settings and workloads, plus the
//! TOML cluster/workload/calibration file formats accepted by the CLI.

use std::path::Path;
use std::sync::OnceLock;

use serde::Deserialize;
use thiserror::Error;

use crate::domain::{ClusterSpec, Machine, MachineTypeSpec, WorkloadSpec};
use crate::simulator::SimParams;

const CALIBRATION_TOML: &str = include_str!("../fixtures/calibration.toml");
const WORKLOADS_TOML: &str = include_str!("../fixtures/workloads.toml");

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown setting {0} (expected A, B or C)")]
    UnknownSetting(char),
    #[error("unknown workload {0}")]
    UnknownWorkload(String),
    #[error("batch {batch} outside {workload}'s range {lo}..={hi}")]
    BatchOutOfRange {
        workload: String,
        batch: u64,
        lo: u64,
        hi: u64,
    },
    #[error("invalid fixture: {0}")]
    Invalid(String),
}

/// The simulator calibration shipped with the tool.
pub fn builtin_calibration() -> SimParams {
    static CAL: OnceLock<SimParams> = OnceLock::new();
    CAL.get_or_init(|| {
        toml::from_str(CALIBRATION_TOML).expect("embedded calibration fixture is well-formed")
    })
    .clone()
}

fn builtin_machine_types() -> Vec<MachineTypeSpec> {
    vec![
        MachineTypeSpec {
            type_name: "g2.2xlarge".into(),
            hyperthreads: 8,
            gpu_count: 1,
            gpu_model: Some("K520".into()),
        },
        MachineTypeSpec {
            type_name: "c4.2xlarge".into(),
            hyperthreads: 8,
            gpu_count: 0,
            gpu_model: None,
        },
        MachineTypeSpec {
            type_name: "c4.4xlarge".into(),
            hyperthreads: 16,
            gpu_count: 0,
            gpu_model: None,
        },
        MachineTypeSpec {
            type_name: "c4.8xlarge".into(),
            hyperthreads: 36,
            gpu_count: 0,
            gpu_model: None,
        },
    ]
}

/// Machine mix of the three reference settings, in declaration order.
fn setting_composition(setting: char) -> Option<&'static [(&'static str, usize)]> {
    match setting {
        'A' => Some(&[("c4.2xlarge", 6), ("c4.4xlarge", 2), ("c4.8xlarge", 2)]),
        'B' => Some(&[
            ("g2.2xlarge", 1),
            ("c4.2xlarge", 3),
            ("c4.4xlarge", 3),
            ("c4.8xlarge", 3),
        ]),
        'C' => Some(&[
            ("g2.2xlarge", 2),
            ("c4.2xlarge", 2),
            ("c4.4xlarge", 2),
            ("c4.8xlarge", 4),
        ]),
        _ => None,
    }
}

/// One of the three reference clusters, with the shipped calibration as its
/// hidden ground truth.
pub fn builtin_setting(setting: char) -> Result<ClusterSpec, FixtureError> {
    let composition = setting_composition(setting.to_ascii_uppercase())
        .ok_or(FixtureError::UnknownSetting(setting))?;
    let mut machines = Vec::new();
    let mut idx = 0;
    for &(type_name, count) in composition {
        for _ in 0..count {
            machines.push(Machine {
                id: format!("m{idx:02}"),
                type_name: type_name.into(),
            });
            idx += 1;
        }
    }
    let types: Vec<MachineTypeSpec> = builtin_machine_types()
        .into_iter()
        .filter(|t| composition.iter().any(|&(name, _)| name == t.type_name))
        .collect();
    ClusterSpec::new(machines, types, Some(builtin_calibration()))
        .map_err(|e| FixtureError::Invalid(e.to_string()))
}

#[derive(Debug, Deserialize)]
struct WorkloadRow {
    name: String,
    model_size_mb: f64,
    ops_millions: f64,
    batch_min: u64,
    batch_max: u64,
}

#[derive(Debug, Deserialize)]
struct WorkloadTable {
    workloads: Vec<WorkloadRow>,
}

fn builtin_workload_rows() -> &'static [WorkloadRow] {
    static ROWS: OnceLock<Vec<WorkloadRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let table: WorkloadTable =
            toml::from_str(WORKLOADS_TOML).expect("embedded workload fixture is well-formed");
        table.workloads
    })
}

pub fn workload_names() -> Vec<String> {
    builtin_workload_rows()
        .iter()
        .map(|r| r.name.clone())
        .collect()
}

/// A built-in workload at the requested batch size.
pub fn builtin_workload(name: &str, batch_size: u64) -> Result<WorkloadSpec, FixtureError> {
    let row = builtin_workload_rows()
        .iter()
        .find(|r| r.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| FixtureError::UnknownWorkload(name.to_string()))?;
    if batch_size < row.batch_min || batch_size > row.batch_max {
        return Err(FixtureError::BatchOutOfRange {
            workload: row.name.clone(),
            batch: batch_size,
            lo: row.batch_min,
            hi: row.batch_max,
        });
    }
    Ok(WorkloadSpec {
        name: row.name.clone(),
        model_size_mb: row.model_size_mb,
        ops_millions: row.ops_millions,
        batch_size,
        batch_range: Some((row.batch_min, row.batch_max)),
    })
}

/// Powers of two inside the workload's declared batch range, smallest first.
pub fn batch_powers(workload: &WorkloadSpec) -> Vec<u64> {
    let Some((lo, hi)) = workload.batch_range else {
        return vec![workload.batch_size];
    };
    let mut out = Vec::new();
    let mut p = lo.next_power_of_two();
    while p <= hi {
        out.push(p);
        p *= 2;
    }
    out
}

fn read(path: &Path) -> Result<String, FixtureError> {
    std::fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a cluster file. When the file carries no `[sim_params]` table the
/// shipped calibration is substituted so the cluster stays simulatable.
pub fn load_cluster(path: &Path) -> Result<ClusterSpec, FixtureError> {
    let text = read(path)?;
    let mut cluster: ClusterSpec = toml::from_str(&text).map_err(|e| FixtureError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if cluster.sim_params.is_none() {
        cluster.sim_params = Some(builtin_calibration());
    }
    ClusterSpec::new(cluster.machines, cluster.machine_types, cluster.sim_params)
        .map_err(|e| FixtureError::Invalid(e.to_string()))
}

#[derive(Debug, Deserialize)]
struct WorkloadFile {
    name: String,
    model_size_mb: f64,
    ops_millions: f64,
    batch_min: Option<u64>,
    batch_max: Option<u64>,
}

/// Loads a single-workload file; the batch size still comes from the caller.
pub fn load_workload(path: &Path, batch_size: u64) -> Result<WorkloadSpec, FixtureError> {
    let text = read(path)?;
    let file: WorkloadFile = toml::from_str(&text).map_err(|e| FixtureError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let batch_range = match (file.batch_min, file.batch_max) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => None,
        _ => {
            return Err(FixtureError::Invalid(format!(
                "{}: batch_min and batch_max must be given together",
                path.display()
            )))
        }
    };
    if let Some((lo, hi)) = batch_range {
        if batch_size < lo || batch_size > hi {
            return Err(FixtureError::BatchOutOfRange {
                workload: file.name,
                batch: batch_size,
                lo,
                hi,
            });
        }
    }
    let workload = WorkloadSpec {
        name: file.name,
        model_size_mb: file.model_size_mb,
        ops_millions: file.ops_millions,
        batch_size,
        batch_range,
    };
    workload
        .check()
        .map_err(|e| FixtureError::Invalid(e.to_string()))?;
    Ok(workload)
}
