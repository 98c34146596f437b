//! Synthetic cluster: given a configuration it plays out the 20-iteration
//! timing experiment a real deployment would run and reports per-device,
//! per-machine, communication and total times.
//!
//! Compute follows a saturating rate curve (throughput improves with load),
//! multi-device machines pay a local gradient-aggregation cost, and
//! communication is the per-machine transfer over its link speed plus a
//! congestion term that deliberately deviates from the pure parametric form.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate, ClusterSpec, Configuration, DeviceRef, DeviceType, MachineAssignment, WorkloadSpec,
};
use crate::fixtures::{self, FixtureError};
use crate::rngutil;

/// Compute cost proxy that device peak rates are calibrated against.
pub const REFERENCE_OPS_MILLIONS: f64 = 1000.0;

pub const ITERATIONS: usize = 20;
pub const MEASURED_ITERATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cluster has no simulator parameters")]
    MissingSimParams,
    #[error("no simulator parameters for device type {0}")]
    UnknownDeviceType(String),
    #[error("no simulator parameters for machine type {0}")]
    UnknownMachineType(String),
}

/// Ground-truth rate curve of one device type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTypeParams {
    pub peak_rate_inputs_per_s: f64,
    pub half_load_inputs: f64,
    pub startup_s: f64,
}

/// Ground-truth aggregation throughput and link speed of one machine type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineTypeParams {
    pub agg_rate_mb_per_s: f64,
    pub connection_speed_mb_per_s: f64,
}

/// Hidden ground truth the simulator runs on. Real clusters would not expose
/// this; the tuner only ever sees [`Measurement`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Keyed by [`DeviceType`] display form, e.g. `cpu/c4.4xlarge`, `gpu/K520`.
    pub device_types: BTreeMap<String, DeviceTypeParams>,
    pub machine_types: BTreeMap<String, MachineTypeParams>,
    /// Log-scale multiplicative noise on every timed component.
    pub noise_sigma: f64,
    /// Factor applied to iteration 0, decaying linearly to 1 at iteration 10.
    pub warmup_inflation: f64,
    /// Weight of the shared-network congestion term in communication time.
    pub congestion_gamma: f64,
    pub seed: u64,
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn at_least(x: f64, floor: f64) -> bool {
    x.is_finite() && x >= floor
}

impl SimParams {
    pub fn check(&self, cluster: &ClusterSpec) -> Result<(), SimError> {
        for (key, d) in &self.device_types {
            if !positive(d.peak_rate_inputs_per_s)
                || !positive(d.half_load_inputs)
                || !at_least(d.startup_s, 0.0)
            {
                return Err(SimError::UnknownDeviceType(format!(
                    "{key}: non-positive parameter"
                )));
            }
        }
        for (key, m) in &self.machine_types {
            if !positive(m.agg_rate_mb_per_s) || !positive(m.connection_speed_mb_per_s) {
                return Err(SimError::UnknownMachineType(format!(
                    "{key}: non-positive parameter"
                )));
            }
        }
        if !at_least(self.noise_sigma, 0.0) {
            return Err(SimError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if !at_least(self.warmup_inflation, 1.0) {
            return Err(SimError::InvalidConfig(
                "warmup_inflation must be >= 1".into(),
            ));
        }
        if !at_least(self.congestion_gamma, 0.0) {
            return Err(SimError::InvalidConfig(
                "congestion_gamma must be >= 0".into(),
            ));
        }
        for device in cluster.devices() {
            let dt = cluster
                .device_type(&device)
                .map_err(|e| SimError::UnknownDeviceType(e.to_string()))?;
            if !self.device_types.contains_key(&dt.to_string()) {
                return Err(SimError::UnknownDeviceType(dt.to_string()));
            }
        }
        for name in cluster.machine_type_names() {
            if !self.machine_types.contains_key(&name) {
                return Err(SimError::UnknownMachineType(name));
            }
        }
        Ok(())
    }

    pub fn device_params(&self, device_type: &DeviceType) -> Result<&DeviceTypeParams, SimError> {
        self.device_types
            .get(&device_type.to_string())
            .ok_or_else(|| SimError::UnknownDeviceType(device_type.to_string()))
    }

    pub fn machine_params(&self, type_name: &str) -> Result<&MachineTypeParams, SimError> {
        self.machine_types
            .get(type_name)
            .ok_or_else(|| SimError::UnknownMachineType(type_name.to_string()))
    }

    /// Time for one device of `device_type` to process `n` inputs. Zero for
    /// `n = 0`; otherwise `startup + n / rate(n)` with the saturating rate
    /// `peak_eff * n / (n + half_load)`, where `peak_eff` scales the peak
    /// rate by `REFERENCE_OPS_MILLIONS / ops_millions`. Total time is
    /// strictly increasing in `n`, per-input time strictly decreasing.
    pub fn device_time(
        &self,
        device_type: &DeviceType,
        n: u64,
        workload: &WorkloadSpec,
    ) -> Result<f64, SimError> {
        if n == 0 {
            return Ok(0.0);
        }
        let p = self.device_params(device_type)?;
        let peak_eff = p.peak_rate_inputs_per_s * (REFERENCE_OPS_MILLIONS / workload.ops_millions);
        Ok(p.startup_s + (n as f64 + p.half_load_inputs) / peak_eff)
    }

    /// Compute time of one machine: the slowest of its active devices plus
    /// the local gradient-aggregation cost `(active - 1) * model_size_mb /
    /// agg_rate`, which is zero when at most one device is active.
    pub fn machine_time(
        &self,
        cluster: &ClusterSpec,
        assignment: &MachineAssignment,
        workload: &WorkloadSpec,
    ) -> Result<f64, SimError> {
        let parts = self.machine_time_parts(cluster, assignment, workload)?;
        Ok(parts
            .device_times
            .iter()
            .map(|(_, t)| *t)
            .fold(0.0, f64::max)
            + parts.aggregation)
    }

    fn machine_time_parts(
        &self,
        cluster: &ClusterSpec,
        assignment: &MachineAssignment,
        workload: &WorkloadSpec,
    ) -> Result<MachineTimeParts, SimError> {
        let mut device_times = Vec::new();
        for (slot, &load) in assignment.device_loads.iter().enumerate() {
            if load == 0 {
                continue;
            }
            let device = if slot == 0 {
                DeviceRef::cpu(&assignment.machine_id)
            } else {
                DeviceRef::gpu(&assignment.machine_id, (slot - 1) as u32)
            };
            let dt = cluster
                .device_type(&device)
                .map_err(|e| SimError::UnknownDeviceType(e.to_string()))?;
            device_times.push((device, self.device_time(&dt, load, workload)?));
        }
        let aggregation = if device_times.len() > 1 {
            let type_name = &cluster
                .type_of(&assignment.machine_id)
                .ok_or_else(|| SimError::UnknownMachineType(assignment.machine_id.clone()))?
                .type_name;
            let mp = self.machine_params(type_name)?;
            (device_times.len() as f64 - 1.0) * workload.model_size_mb / mp.agg_rate_mb_per_s
        } else {
            0.0
        };
        Ok(MachineTimeParts {
            device_times,
            aggregation,
        })
    }

    /// Communication time of a configuration: the bottleneck machine's
    /// transfer over its link speed, plus a congestion term proportional to
    /// all bytes crossing the network over the cluster's total link capacity.
    pub fn comm_time(
        &self,
        cluster: &ClusterSpec,
        config: &Configuration,
        workload: &WorkloadSpec,
    ) -> Result<f64, SimError> {
        let mut bottleneck: f64 = 0.0;
        let mut total_mb = 0.0;
        let mut total_speed = 0.0;
        for m in &cluster.machines {
            let speed = self.machine_params(&m.type_name)?.connection_speed_mb_per_s;
            let t = transfer_mb(config, &m.id, workload);
            bottleneck = bottleneck.max(t / speed);
            total_mb += t;
            total_speed += speed;
        }
        Ok(bottleneck + self.congestion_gamma * total_mb / total_speed)
    }
}

struct MachineTimeParts {
    device_times: Vec<(DeviceRef, f64)>,
    aggregation: f64,
}

/// Megabytes machine `machine_id` must move per iteration. Parameters are
/// sharded equally across the `P` parameter servers (shard `s = model / P`);
/// a worker exchanges `2 * (model - s)` with remote servers when it hosts a
/// shard itself and `2 * model` otherwise, and a server exchanges `2 * s`
/// with each remote worker. Traffic a machine exchanges with itself does not
/// cross the network.
pub fn transfer_mb(config: &Configuration, machine_id: &str, workload: &WorkloadSpec) -> f64 {
    let w = config.worker_count() as f64;
    let p = config.ps_count() as f64;
    if p == 0.0 {
        return 0.0;
    }
    let shard = workload.model_size_mb / p;
    let Some(a) = config.assignment(machine_id) else {
        return 0.0;
    };
    let is_worker = a.is_worker();
    let mut mb = 0.0;
    if is_worker {
        mb += 2.0 * (workload.model_size_mb - if a.is_ps { shard } else { 0.0 });
    }
    if a.is_ps {
        mb += 2.0 * shard * (w - if is_worker { 1.0 } else { 0.0 });
    }
    mb
}

/// Timings observed for one evaluated configuration. Component times are the
/// mean of the last ten iterations' draws; `objective` is the mean of the
/// last ten iteration times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    #[serde(with = "device_time_map")]
    pub device_times: BTreeMap<DeviceRef, f64>,
    pub machine_times: BTreeMap<String, f64>,
    pub comm_time: f64,
    pub iteration_times: Vec<f64>,
    pub objective: f64,
}

mod device_time_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<DeviceRef, f64>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let flat: BTreeMap<String, f64> = map.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        serde::Serialize::serialize(&flat, ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<DeviceRef, f64>, D::Error> {
        let flat: BTreeMap<String, f64> = serde::Deserialize::deserialize(de)?;
        flat.into_iter()
            .map(|(k, v)| {
                parse_device(&k)
                    .map(|d| (d, v))
                    .ok_or_else(|| serde::de::Error::custom(format!("bad device key {k}")))
            })
            .collect()
    }

    fn parse_device(s: &str) -> Option<DeviceRef> {
        let (machine, dev) = s.rsplit_once('.')?;
        if dev == "cpu" {
            Some(DeviceRef::cpu(machine))
        } else {
            let idx: u32 = dev.strip_prefix("gpu")?.parse().ok()?;
            Some(DeviceRef::gpu(machine, idx))
        }
    }
}

fn warmup_factor(params: &SimParams, iteration: usize) -> f64 {
    if iteration >= MEASURED_ITERATIONS {
        1.0
    } else {
        let frac = iteration as f64 / MEASURED_ITERATIONS as f64;
        params.warmup_inflation + (1.0 - params.warmup_inflation) * frac
    }
}

/// Runs the 20-iteration timing experiment for `config`. Each iteration draws
/// per-component lognormal noise `exp(noise_sigma * z)`; the first ten
/// iterations are additionally inflated by the warmup factor and excluded
/// from the reported means. Deterministic given `seed`.
pub fn run_experiment(
    config: &Configuration,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    seed: u64,
) -> Result<Measurement, SimError> {
    let result = validate(config, cluster, workload);
    if !result.is_ok() {
        return Err(SimError::InvalidConfig(result.to_string()));
    }
    let params = cluster
        .sim_params
        .as_ref()
        .ok_or(SimError::MissingSimParams)?;

    let mut machine_parts = Vec::new();
    for a in &config.assignments {
        if a.is_worker() {
            machine_parts.push((
                a.machine_id.clone(),
                params.machine_time_parts(cluster, a, workload)?,
            ));
        }
    }
    let comm_base = params.comm_time(cluster, config, workload)?;

    let mut rng = rngutil::stream(&[params.seed, seed, rngutil::hash_str(&config.digest())]);
    let sigma = params.noise_sigma;
    let noise = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (sigma * z).exp()
    };

    let mut device_sums: BTreeMap<DeviceRef, f64> = BTreeMap::new();
    let mut machine_sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut comm_sum = 0.0;
    let mut iteration_times = Vec::with_capacity(ITERATIONS);

    for it in 0..ITERATIONS {
        let measured = it >= ITERATIONS - MEASURED_ITERATIONS;
        let mut max_machine: f64 = 0.0;
        for (machine_id, parts) in &machine_parts {
            let mut max_device: f64 = 0.0;
            for (device, base) in &parts.device_times {
                let t = base * noise(&mut rng);
                max_device = max_device.max(t);
                if measured {
                    *device_sums.entry(device.clone()).or_insert(0.0) += t;
                }
            }
            let agg = if parts.device_times.len() > 1 {
                parts.aggregation * noise(&mut rng)
            } else {
                0.0
            };
            let mt = max_device + agg;
            max_machine = max_machine.max(mt);
            if measured {
                *machine_sums.entry(machine_id.clone()).or_insert(0.0) += mt;
            }
        }
        let ct = comm_base * noise(&mut rng);
        if measured {
            comm_sum += ct;
        }
        iteration_times.push((max_machine + ct) * warmup_factor(params, it));
    }

    let n = MEASURED_ITERATIONS as f64;
    let objective = iteration_times[ITERATIONS - MEASURED_ITERATIONS..]
        .iter()
        .sum::<f64>()
        / n;
    Ok(Measurement {
        device_times: device_sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        machine_times: machine_sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        comm_time: comm_sum / n,
        iteration_times,
        objective,
    })
}

/// Exact iteration time with noise and warmup off: the slowest machine's
/// compute time plus communication time.
pub fn noiseless_objective(
    config: &Configuration,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
) -> Result<f64, SimError> {
    let params = cluster
        .sim_params
        .as_ref()
        .ok_or(SimError::MissingSimParams)?;
    let mut max_machine: f64 = 0.0;
    for a in &config.assignments {
        if a.is_worker() {
            max_machine = max_machine.max(params.machine_time(cluster, a, workload)?);
        }
    }
    Ok(max_machine + params.comm_time(cluster, config, workload)?)
}

/// Builds one of the three reference clusters together with a named workload,
/// using the shipped calibration fixture as ground truth.
pub fn make_setting(
    setting: char,
    workload_name: &str,
    batch_size: u64,
) -> Result<(ClusterSpec, WorkloadSpec), FixtureError> {
    let cluster = fixtures::builtin_setting(setting)?;
    let workload = fixtures::builtin_workload(workload_name, batch_size)?;
    Ok((cluster, workload))
}
