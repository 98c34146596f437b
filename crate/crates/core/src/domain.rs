//! Search domain: cluster and workload descriptions, schedule configurations,
//! validity rules, and the configuration generators shared by the simulator,
//! the performance model and the optimizers.
//!
//! A [`Configuration`] assigns every machine a parameter-server flag and every
//! device an integer load (inputs per iteration). The worker flag is derived:
//! a machine is a worker exactly when it has positive total load. Loads must
//! sum to the workload batch size.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::SimParams;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("batch too small for uniform split: batch {batch} < {devices} devices")]
    BatchTooSmall { batch: u64, devices: usize },
    #[error("no gpu devices")]
    NoGpuDevices,
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
    #[error("unknown machine {0}")]
    UnknownMachine(String),
}

/// Kind of compute device on a machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Cpu,
    Gpu,
}

/// One device of one machine. `device_index` is 0 for the CPU and the GPU
/// ordinal otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceRef {
    pub machine_id: String,
    pub device_kind: DeviceKind,
    pub device_index: u32,
}

impl DeviceRef {
    pub fn cpu(machine_id: impl Into<String>) -> Self {
        DeviceRef {
            machine_id: machine_id.into(),
            device_kind: DeviceKind::Cpu,
            device_index: 0,
        }
    }

    pub fn gpu(machine_id: impl Into<String>, index: u32) -> Self {
        DeviceRef {
            machine_id: machine_id.into(),
            device_kind: DeviceKind::Gpu,
            device_index: index,
        }
    }
}

impl fmt::Display for DeviceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.device_kind {
            DeviceKind::Cpu => write!(f, "{}.cpu", self.machine_id),
            DeviceKind::Gpu => write!(f, "{}.gpu{}", self.machine_id, self.device_index),
        }
    }
}

/// Hardware class under which identical devices are pooled: observations from
/// every c4.4xlarge CPU land in one bucket, likewise every K520 GPU.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeviceType {
    Cpu { machine_type: String },
    Gpu { model: String },
}

impl fmt::Display for DeviceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceType::Cpu { machine_type } => write!(f, "cpu/{machine_type}"),
            DeviceType::Gpu { model } => write!(f, "gpu/{model}"),
        }
    }
}

impl std::str::FromStr for DeviceType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('/') {
            Some(("cpu", t)) => Ok(DeviceType::Cpu {
                machine_type: t.to_string(),
            }),
            Some(("gpu", m)) => Ok(DeviceType::Gpu {
                model: m.to_string(),
            }),
            _ => Err(format!("bad device type key: {s}")),
        }
    }
}

/// Hardware description of one machine class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineTypeSpec {
    pub type_name: String,
    pub hyperthreads: u32,
    pub gpu_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_model: Option<String>,
}

impl MachineTypeSpec {
    fn check(&self) -> Result<(), DomainError> {
        if self.hyperthreads < 1 {
            return Err(DomainError::InvalidCluster(format!(
                "machine type {} must have at least one hyperthread",
                self.type_name
            )));
        }
        if (self.gpu_count > 0) != self.gpu_model.is_some() {
            return Err(DomainError::InvalidCluster(format!(
                "machine type {}: gpu_model must be present iff gpu_count > 0",
                self.type_name
            )));
        }
        Ok(())
    }
}

/// One machine of the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub id: String,
    pub type_name: String,
}

/// The machines available for scheduling. `sim_params` carries the hidden
/// ground truth used by the simulator; real runs would not have it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub machines: Vec<Machine>,
    pub machine_types: Vec<MachineTypeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_params: Option<SimParams>,
}

impl ClusterSpec {
    /// Builds a cluster, sorting machines into canonical (id) order and
    /// checking the structural invariants.
    pub fn new(
        mut machines: Vec<Machine>,
        machine_types: Vec<MachineTypeSpec>,
        sim_params: Option<SimParams>,
    ) -> Result<Self, DomainError> {
        machines.sort_by(|a, b| a.id.cmp(&b.id));
        let cluster = ClusterSpec {
            machines,
            machine_types,
            sim_params,
        };
        cluster.check()?;
        Ok(cluster)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        let mut seen = BTreeSet::new();
        for m in &self.machines {
            if !seen.insert(&m.id) {
                return Err(DomainError::InvalidCluster(format!(
                    "duplicate machine id {}",
                    m.id
                )));
            }
            if self.machine_type(&m.type_name).is_none() {
                return Err(DomainError::InvalidCluster(format!(
                    "machine {} has unknown type {}",
                    m.id, m.type_name
                )));
            }
        }
        if self.machines.is_empty() {
            return Err(DomainError::InvalidCluster(
                "cluster has no machines".into(),
            ));
        }
        let mut type_names = BTreeSet::new();
        for t in &self.machine_types {
            t.check()?;
            if !type_names.insert(&t.type_name) {
                return Err(DomainError::InvalidCluster(format!(
                    "duplicate machine type {}",
                    t.type_name
                )));
            }
        }
        if let Some(sp) = &self.sim_params {
            sp.check(self)
                .map_err(|e| DomainError::InvalidCluster(e.to_string()))?;
        }
        Ok(())
    }

    pub fn machine_type(&self, type_name: &str) -> Option<&MachineTypeSpec> {
        self.machine_types.iter().find(|t| t.type_name == type_name)
    }

    pub fn type_of(&self, machine_id: &str) -> Option<&MachineTypeSpec> {
        let m = self.machines.iter().find(|m| m.id == machine_id)?;
        self.machine_type(&m.type_name)
    }

    /// All devices in canonical order: machines by id, CPU before GPUs.
    pub fn devices(&self) -> Vec<DeviceRef> {
        let mut out = Vec::new();
        for m in &self.machines {
            out.push(DeviceRef::cpu(&m.id));
            let spec = self.machine_type(&m.type_name).expect("checked");
            for g in 0..spec.gpu_count {
                out.push(DeviceRef::gpu(&m.id, g));
            }
        }
        out
    }

    pub fn device_count(&self) -> usize {
        self.machines
            .iter()
            .map(|m| {
                1 + self
                    .machine_type(&m.type_name)
                    .map_or(0, |t| t.gpu_count as usize)
            })
            .sum()
    }

    pub fn device_type(&self, device: &DeviceRef) -> Result<DeviceType, DomainError> {
        let spec = self
            .type_of(&device.machine_id)
            .ok_or_else(|| DomainError::UnknownMachine(device.machine_id.clone()))?;
        Ok(match device.device_kind {
            DeviceKind::Cpu => DeviceType::Cpu {
                machine_type: spec.type_name.clone(),
            },
            DeviceKind::Gpu => DeviceType::Gpu {
                model: spec.gpu_model.clone().unwrap_or_else(|| "unknown".into()),
            },
        })
    }

    pub fn gpu_machines(&self) -> Vec<&Machine> {
        self.machines
            .iter()
            .filter(|m| {
                self.machine_type(&m.type_name)
                    .is_some_and(|t| t.gpu_count > 0)
            })
            .collect()
    }

    pub fn has_gpus(&self) -> bool {
        !self.gpu_machines().is_empty()
    }

    /// Sorted distinct machine type names present in the cluster.
    pub fn machine_type_names(&self) -> Vec<String> {
        let set: BTreeSet<_> = self.machines.iter().map(|m| m.type_name.clone()).collect();
        set.into_iter().collect()
    }
}

/// Training workload: parameter size (transferred each iteration), a compute
/// cost proxy, and the batch size being scheduled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub model_size_mb: f64,
    pub ops_millions: f64,
    pub batch_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_range: Option<(u64, u64)>,
}

impl WorkloadSpec {
    pub fn check(&self) -> Result<(), DomainError> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.model_size_mb) || !positive(self.ops_millions) {
            return Err(DomainError::InvalidWorkload(format!(
                "{}: model_size_mb and ops_millions must be positive",
                self.name
            )));
        }
        if self.batch_size == 0 {
            return Err(DomainError::InvalidWorkload(format!(
                "{}: batch_size must be > 0",
                self.name
            )));
        }
        if let Some((lo, hi)) = self.batch_range {
            if self.batch_size < lo || self.batch_size > hi {
                return Err(DomainError::InvalidWorkload(format!(
                    "{}: batch {} outside declared range {lo}..={hi}",
                    self.name, self.batch_size
                )));
            }
        }
        Ok(())
    }
}

/// Per-machine slice of a configuration. `device_loads[0]` is the CPU load,
/// the rest are GPU loads by ordinal. The worker flag is `total_load() > 0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MachineAssignment {
    pub machine_id: String,
    pub is_ps: bool,
    pub device_loads: Vec<u64>,
}

impl MachineAssignment {
    pub fn total_load(&self) -> u64 {
        self.device_loads.iter().sum()
    }

    pub fn is_worker(&self) -> bool {
        self.total_load() > 0
    }
}

/// A full schedule: the point in the search domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    /// One entry per cluster machine, in canonical (machine id) order.
    pub assignments: Vec<MachineAssignment>,
}

impl Configuration {
    /// Zero-load, no-PS skeleton covering every machine of the cluster.
    pub fn empty(cluster: &ClusterSpec) -> Configuration {
        let assignments = cluster
            .machines
            .iter()
            .map(|m| {
                let gpus = cluster
                    .machine_type(&m.type_name)
                    .map_or(0, |t| t.gpu_count) as usize;
                MachineAssignment {
                    machine_id: m.id.clone(),
                    is_ps: false,
                    device_loads: vec![0; 1 + gpus],
                }
            })
            .collect();
        Configuration { assignments }
    }

    pub fn assignment(&self, machine_id: &str) -> Option<&MachineAssignment> {
        self.assignments.iter().find(|a| a.machine_id == machine_id)
    }

    pub fn assignment_mut(&mut self, machine_id: &str) -> Option<&mut MachineAssignment> {
        self.assignments
            .iter_mut()
            .find(|a| a.machine_id == machine_id)
    }

    pub fn load_of(&self, device: &DeviceRef) -> u64 {
        self.assignment(&device.machine_id)
            .and_then(|a| a.device_loads.get(device_slot(device)).copied())
            .unwrap_or(0)
    }

    pub fn set_load(&mut self, device: &DeviceRef, load: u64) {
        if let Some(a) = self.assignment_mut(&device.machine_id) {
            let slot = device_slot(device);
            if slot < a.device_loads.len() {
                a.device_loads[slot] = load;
            }
        }
    }

    /// All (device, load) pairs in canonical order, including zero loads.
    pub fn device_loads(&self) -> Vec<(DeviceRef, u64)> {
        let mut out = Vec::new();
        for a in &self.assignments {
            for (slot, &load) in a.device_loads.iter().enumerate() {
                out.push((slot_device(&a.machine_id, slot), load));
            }
        }
        out
    }

    pub fn total_load(&self) -> u64 {
        self.assignments.iter().map(|a| a.total_load()).sum()
    }

    pub fn worker_ids(&self) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|a| a.is_worker())
            .map(|a| a.machine_id.as_str())
            .collect()
    }

    pub fn ps_ids(&self) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|a| a.is_ps)
            .map(|a| a.machine_id.as_str())
            .collect()
    }

    pub fn worker_count(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_worker()).count()
    }

    pub fn ps_count(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_ps).count()
    }

    /// Compact human-readable identity string, stable across runs.
    pub fn digest(&self) -> String {
        let mut w = String::new();
        for a in &self.assignments {
            if !a.is_worker() {
                continue;
            }
            if !w.is_empty() {
                w.push(' ');
            }
            w.push_str(&a.machine_id);
            w.push(':');
            let mut first = true;
            for (slot, &load) in a.device_loads.iter().enumerate() {
                if load == 0 {
                    continue;
                }
                if !first {
                    w.push('+');
                }
                first = false;
                let d = slot_device(&a.machine_id, slot);
                match d.device_kind {
                    DeviceKind::Cpu => w.push_str(&format!("cpu={load}")),
                    DeviceKind::Gpu => w.push_str(&format!("gpu{}={load}", d.device_index)),
                }
            }
        }
        let ps: Vec<&str> = self.ps_ids();
        format!("w[{w}] ps[{}]", ps.join(" "))
    }
}

fn device_slot(device: &DeviceRef) -> usize {
    match device.device_kind {
        DeviceKind::Cpu => 0,
        DeviceKind::Gpu => 1 + device.device_index as usize,
    }
}

fn slot_device(machine_id: &str, slot: usize) -> DeviceRef {
    if slot == 0 {
        DeviceRef::cpu(machine_id)
    } else {
        DeviceRef::gpu(machine_id, (slot - 1) as u32)
    }
}

/// A violated configuration invariant. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    LoadSumMismatch {
        total: u64,
        batch: u64,
    },
    NoParameterServer,
    NoWorker,
    UnknownMachine {
        machine_id: String,
    },
    MissingMachine {
        machine_id: String,
    },
    DeviceCountMismatch {
        machine_id: String,
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LoadSumMismatch { total, batch } => {
                write!(f, "loads sum {total} != batch {batch}")
            }
            Violation::NoParameterServer => write!(f, "no machine is a parameter server"),
            Violation::NoWorker => write!(f, "no machine is a worker"),
            Violation::UnknownMachine { machine_id } => {
                write!(f, "configuration references unknown machine {machine_id}")
            }
            Violation::MissingMachine { machine_id } => {
                write!(f, "configuration is missing machine {machine_id}")
            }
            Violation::DeviceCountMismatch {
                machine_id,
                expected,
                got,
            } => {
                write!(
                    f,
                    "machine {machine_id} has {got} device slots, cluster says {expected}"
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            write!(f, "ok")
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            write!(f, "{}", msgs.join("; "))
        }
    }
}

/// Checks a configuration against the cluster and workload. Returns the full
/// list of violated invariants rather than failing on the first.
pub fn validate(
    config: &Configuration,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
) -> ValidationResult {
    let mut violations = Vec::new();

    for a in &config.assignments {
        match cluster.type_of(&a.machine_id) {
            None => violations.push(Violation::UnknownMachine {
                machine_id: a.machine_id.clone(),
            }),
            Some(spec) => {
                let expected = 1 + spec.gpu_count as usize;
                if a.device_loads.len() != expected {
                    violations.push(Violation::DeviceCountMismatch {
                        machine_id: a.machine_id.clone(),
                        expected,
                        got: a.device_loads.len(),
                    });
                }
            }
        }
    }
    for m in &cluster.machines {
        if config.assignment(&m.id).is_none() {
            violations.push(Violation::MissingMachine {
                machine_id: m.id.clone(),
            });
        }
    }

    let total = config.total_load();
    if total != workload.batch_size {
        violations.push(Violation::LoadSumMismatch {
            total,
            batch: workload.batch_size,
        });
    }
    if config.ps_count() == 0 {
        violations.push(Violation::NoParameterServer);
    }
    if config.worker_count() == 0 {
        violations.push(Violation::NoWorker);
    }

    ValidationResult { violations }
}

/// Splits `batch` into `n` near-equal integer shares; the first `batch % n`
/// slots get one extra. Slot order is the caller's canonical order.
fn even_split(batch: u64, n: usize) -> Vec<u64> {
    let n64 = n as u64;
    let base = batch / n64;
    let extra = (batch % n64) as usize;
    (0..n).map(|i| base + u64::from(i < extra)).collect()
}

/// Baseline: the batch balanced equally across every device of the cluster;
/// every machine is both worker and parameter server.
pub fn uniform_devices(
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
) -> Result<Configuration, DomainError> {
    let devices = cluster.devices();
    if (workload.batch_size as u128) < devices.len() as u128 {
        return Err(DomainError::BatchTooSmall {
            batch: workload.batch_size,
            devices: devices.len(),
        });
    }
    let shares = even_split(workload.batch_size, devices.len());
    let mut config = Configuration::empty(cluster);
    for (d, share) in devices.iter().zip(shares) {
        config.set_load(d, share);
    }
    for a in &mut config.assignments {
        a.is_ps = true;
    }
    Ok(config)
}

/// Baseline: the batch balanced equally across GPUs only; every GPU host is
/// both worker and parameter server.
pub fn uniform_gpus(
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
) -> Result<Configuration, DomainError> {
    let gpus: Vec<DeviceRef> = cluster
        .devices()
        .into_iter()
        .filter(|d| d.device_kind == DeviceKind::Gpu)
        .collect();
    if gpus.is_empty() {
        return Err(DomainError::NoGpuDevices);
    }
    if (workload.batch_size as u128) < gpus.len() as u128 {
        return Err(DomainError::BatchTooSmall {
            batch: workload.batch_size,
            devices: gpus.len(),
        });
    }
    let shares = even_split(workload.batch_size, gpus.len());
    let mut config = Configuration::empty(cluster);
    for (d, share) in gpus.iter().zip(shares) {
        config.set_load(d, share);
    }
    for a in &mut config.assignments {
        a.is_ps = a.is_worker();
    }
    Ok(config)
}

/// Number of coordinates in the flat encoding of a configuration on this
/// cluster: one PS flag per machine plus one load share per device.
pub fn encode_dim(cluster: &ClusterSpec) -> usize {
    cluster.machines.len() + cluster.device_count()
}

/// Flattens a configuration to `[0,1]` coordinates for the generic flat-GP
/// optimizer: per machine its PS flag, then per device its load as a fraction
/// of the batch.
pub fn encode(config: &Configuration) -> Vec<f64> {
    let batch = config.total_load().max(1) as f64;
    let mut v = Vec::new();
    for a in &config.assignments {
        v.push(if a.is_ps { 1.0 } else { 0.0 });
    }
    for a in &config.assignments {
        for &load in &a.device_loads {
            v.push(load as f64 / batch);
        }
    }
    v
}

/// Inverse of [`encode`], made total: PS flags threshold at 0.5 (falling back
/// to the machine with the largest raw flag when none clears it), raw loads
/// renormalize to the batch by largest-remainder rounding, and an all-zero
/// load vector puts the whole batch on the device with the largest raw
/// coordinate. Always yields a configuration that passes [`validate`].
pub fn decode(
    vector: &[f64],
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
) -> Result<Configuration, DomainError> {
    let expected = encode_dim(cluster);
    if vector.len() != expected {
        return Err(DomainError::DimensionMismatch {
            expected,
            got: vector.len(),
        });
    }
    let n_machines = cluster.machines.len();
    let (flags, raw_loads) = vector.split_at(n_machines);
    let raw_loads: Vec<f64> = raw_loads.iter().map(|x| x.clamp(0.0, 1.0)).collect();

    let mut config = Configuration::empty(cluster);
    for (a, &flag) in config.assignments.iter_mut().zip(flags) {
        a.is_ps = flag >= 0.5;
    }
    if config.ps_count() == 0 {
        let best = flags
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        config.assignments[best].is_ps = true;
    }

    let devices = cluster.devices();
    let loads = largest_remainder(&raw_loads, workload.batch_size);
    match loads {
        Some(loads) => {
            for (d, load) in devices.iter().zip(loads) {
                config.set_load(d, load);
            }
        }
        None => {
            // Degenerate all-zero input: whole batch on the largest raw slot.
            let best = raw_loads
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            config.set_load(&devices[best], workload.batch_size);
        }
    }
    Ok(config)
}

/// Scales non-negative weights so their integer shares sum to `total`,
/// distributing remainders by largest fractional part. Returns `None` when
/// all weights are zero.
pub fn largest_remainder(weights: &[f64], total: u64) -> Option<Vec<u64>> {
    let sum: f64 = weights.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return None;
    }
    let targets: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut shares: Vec<u64> = targets.iter().map(|t| t.floor() as u64).collect();
    let assigned: u64 = shares.iter().sum();
    let mut remainder = (total - assigned) as usize;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if remainder == 0 {
            break;
        }
        shares[i] += 1;
        remainder -= 1;
    }
    Some(shares)
}

/// Uniformly samples a valid configuration: worker and PS subsets are drawn
/// with uniform size then uniform membership (never empty), loads spread over
/// the worker devices by random weights.
pub fn sample_random(
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    rng: &mut ChaCha8Rng,
) -> Configuration {
    let n = cluster.machines.len();
    let workers = random_subset(n, rng);
    let ps = random_subset(n, rng);

    let mut config = Configuration::empty(cluster);
    for (i, a) in config.assignments.iter_mut().enumerate() {
        a.is_ps = ps.contains(&i);
    }
    let devices = cluster.devices();
    let worker_ids: BTreeSet<&str> = workers
        .iter()
        .map(|&i| cluster.machines[i].id.as_str())
        .collect();
    let weights: Vec<f64> = devices
        .iter()
        .map(|d| {
            if worker_ids.contains(d.machine_id.as_str()) {
                rng.random::<f64>()
            } else {
                0.0
            }
        })
        .collect();
    let loads = largest_remainder(&weights, workload.batch_size)
        .unwrap_or_else(|| even_split(workload.batch_size, devices.len()));
    for (d, load) in devices.iter().zip(loads) {
        config.set_load(d, load);
    }
    // A sampled worker can still round to zero load; the derived flag drops it.
    config
}

/// Non-empty subset of `0..n`: size uniform in `1..=n`, members uniform.
fn random_subset(n: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    let size = rng.random_range(1..=n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(size);
    idx.into_iter().collect()
}

/// Builds a configuration from explicit worker loads and a PS set; loads for
/// machines outside the map stay zero.
pub fn config_from_parts(
    cluster: &ClusterSpec,
    loads: &BTreeMap<DeviceRef, u64>,
    ps: &BTreeSet<String>,
) -> Configuration {
    let mut config = Configuration::empty(cluster);
    for (d, &load) in loads {
        config.set_load(d, load);
    }
    for a in &mut config.assignments {
        a.is_ps = ps.contains(&a.machine_id);
    }
    config
}
