//! Composite performance model: per-device-type rate GPs, per-machine-type
//! aggregation GPs, and the semi-parametric communication model (connection
//! speed particles plus a residual GP). Predicts the iteration time of any
//! candidate configuration by forward sampling through the same composition
//! the simulator uses: max over machines of compute time, plus communication.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::domain::{ClusterSpec, Configuration, DeviceType, WorkloadSpec};
use crate::gp::{self, GpError, GpPosterior, JointSampler};
use crate::inference::{
    self, comm_obs_for, init_particles, parametric_comm_for, update, CommObs, ParticleSet,
    RoutedObservations, SpeedPrior,
};
use crate::rngutil;
use crate::simulator::Measurement;

/// Guards the division when a sampled rate goes non-positive; rates are
/// physical even though GP posteriors are unconstrained.
pub const RATE_FLOOR: f64 = 1e-6;

/// Sampled rates are additionally floored at this fraction of their posterior
/// mean. Without it a single near-zero rate draw yields an astronomical time
/// sample and Monte Carlo means never settle.
pub const RELATIVE_RATE_FLOOR: f64 = 0.02;

const PARTICLES: usize = 1000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot fit a performance model with no evaluated configurations")]
    EmptyHistory,
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Rate model for one device type: a fitted GP once the type has been
/// observed, otherwise a prior scaled from the nearest observed hardware.
#[derive(Debug, Clone)]
pub enum RateModel {
    Fitted { gp: GpPosterior },
    Prior { mean: f64, sd: f64 },
}

/// Aggregation model for one multi-device machine type.
#[derive(Debug, Clone)]
pub enum AggModel {
    Fitted { gp: GpPosterior },
    Prior { sd: f64 },
}

#[derive(Debug, Clone)]
pub struct PerfModel {
    device_rates: BTreeMap<DeviceType, RateModel>,
    agg_models: BTreeMap<String, AggModel>,
    comm_particles: ParticleSet,
    comm_residual_gp: Option<GpPosterior>,
    /// Posterior-mean connection speed per type, in particle coordinate order.
    mean_speeds: Vec<f64>,
    observation_count: usize,
}

impl PerfModel {
    /// Routes every measurement to its sub-model and fits them all: device
    /// GPs on (load, rate), aggregation GPs on (load vector, extra time), and
    /// one alternation pass of the communication model (particles with no
    /// residual, residual GP on the posterior-mean residuals, particles
    /// again under that GP).
    pub fn fit(
        history: &[(Configuration, Measurement)],
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
    ) -> Result<PerfModel, ModelError> {
        if history.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        let mut routed = RoutedObservations::default();
        for (config, measurement) in history {
            routed.merge(inference::route(measurement, config, cluster, workload));
        }

        let mut rate_buffers: BTreeMap<DeviceType, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
        for obs in &routed.device_obs {
            let entry = rate_buffers.entry(obs.device_type.clone()).or_default();
            entry.0.push(vec![obs.load as f64]);
            entry.1.push(obs.rate);
        }

        // Mean observed rate per type, for scaling priors of unseen hardware.
        let mean_rates: BTreeMap<DeviceType, f64> = rate_buffers
            .iter()
            .map(|(t, (_, ys))| (t.clone(), ys.iter().sum::<f64>() / ys.len() as f64))
            .collect();

        let mut device_rates = BTreeMap::new();
        let mut cluster_types: Vec<DeviceType> = Vec::new();
        for device in cluster.devices() {
            if let Ok(t) = cluster.device_type(&device) {
                if !cluster_types.contains(&t) {
                    cluster_types.push(t);
                }
            }
        }
        for device_type in cluster_types {
            let model = match rate_buffers.get(&device_type) {
                Some((xs, ys)) => RateModel::Fitted {
                    gp: gp::fit(xs, ys)?,
                },
                None => {
                    let mean = prior_rate(&device_type, cluster, &mean_rates);
                    RateModel::Prior {
                        mean,
                        sd: 0.5 * mean,
                    }
                }
            };
            device_rates.insert(device_type, model);
        }

        let mut agg_buffers: BTreeMap<String, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
        for obs in &routed.agg_obs {
            let entry = agg_buffers.entry(obs.machine_type.clone()).or_default();
            entry.0.push(obs.load_vector.clone());
            entry.1.push(obs.agg_diff);
        }
        let mut agg_models = BTreeMap::new();
        for spec in &cluster.machine_types {
            if spec.gpu_count == 0 {
                continue;
            }
            let model = match agg_buffers.get(&spec.type_name) {
                Some((xs, ys)) => AggModel::Fitted {
                    gp: gp::fit(xs, ys)?,
                },
                None => AggModel::Prior { sd: 0.05 },
            };
            agg_models.insert(spec.type_name.clone(), model);
        }

        let prior = SpeedPrior::for_cluster(cluster);
        let mut rng = rngutil::stream(&[0xC0FF_EE00, history.len() as u64]);
        let comm_obs = &routed.comm_obs;

        let run_pass = |residual: Option<&GpPosterior>, rng: &mut ChaCha8Rng| -> ParticleSet {
            let mut ps = init_particles(PARTICLES, &prior, rng);
            let mut seen: Vec<CommObs> = Vec::new();
            for obs in comm_obs {
                ps = update(&ps, obs, residual, &seen, &prior, rng);
                seen.push(obs.clone());
            }
            ps
        };

        let first_pass = run_pass(None, &mut rng);
        let first_speeds = first_pass.posterior_mean();
        let features: Vec<Vec<f64>> = comm_obs.iter().map(|o| o.features.to_vec()).collect();
        let residuals: Vec<f64> = comm_obs
            .iter()
            .map(|o| o.comm_time - parametric_comm_for(&first_speeds, &first_pass.type_names, o))
            .collect();
        let comm_residual_gp = Some(gp::fit(&features, &residuals)?);

        let comm_particles = run_pass(comm_residual_gp.as_ref(), &mut rng);
        let mean_speeds = comm_particles.posterior_mean();

        Ok(PerfModel {
            device_rates,
            agg_models,
            comm_particles,
            comm_residual_gp,
            mean_speeds,
            observation_count: history.len(),
        })
    }

    pub fn observation_count(&self) -> usize {
        self.observation_count
    }

    /// Posterior-mean processing rate for a device type at a given load.
    pub fn rate_mean(&self, device_type: &DeviceType, load: u64) -> f64 {
        match self.device_rates.get(device_type) {
            Some(RateModel::Fitted { gp }) => gp
                .predict(&[load as f64])
                .map(|(m, _)| m)
                .unwrap_or(RATE_FLOOR),
            Some(RateModel::Prior { mean, .. }) => *mean,
            None => RATE_FLOOR,
        }
        .max(RATE_FLOOR)
    }

    /// Posterior-mean aggregation overhead for a machine type, clamped at 0.
    pub fn agg_mean(&self, machine_type: &str, load_vector: &[f64]) -> f64 {
        match self.agg_models.get(machine_type) {
            Some(AggModel::Fitted { gp }) => gp
                .predict(load_vector)
                .map(|(m, _)| m)
                .unwrap_or(0.0)
                .max(0.0),
            _ => 0.0,
        }
    }

    /// Mean communication prediction: parametric part under the posterior-mean
    /// speeds plus the residual GP mean, clamped at 0.
    pub fn comm_mean(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
    ) -> f64 {
        let obs = comm_obs_for(config, cluster, workload, 0.0);
        let parametric =
            parametric_comm_for(&self.mean_speeds, &self.comm_particles.type_names, &obs);
        let residual = match &self.comm_residual_gp {
            Some(gp) => gp.predict(&obs.features).map(|(m, _)| m).unwrap_or(0.0),
            None => 0.0,
        };
        (parametric + residual).max(0.0)
    }

    /// Deterministic mean-composition prediction: posterior means of every
    /// sub-model composed exactly like a forward sample. Used to guide load
    /// optimization, where a noisy objective would thrash the line search.
    pub fn mean_path(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
    ) -> f64 {
        let mut max_machine: f64 = 0.0;
        for a in &config.assignments {
            if !a.is_worker() {
                continue;
            }
            let mut machine: f64 = 0.0;
            let mut active = 0;
            for (slot, &load) in a.device_loads.iter().enumerate() {
                if load == 0 {
                    continue;
                }
                active += 1;
                let device = slot_device_type(cluster, &a.machine_id, slot);
                let Some(device_type) = device else { continue };
                let rate = self.rate_mean(&device_type, load);
                machine = machine.max(load as f64 / rate);
            }
            if active > 1 {
                if let Some(spec) = cluster.type_of(&a.machine_id) {
                    machine += self.agg_mean(&spec.type_name, &agg_input(a));
                }
            }
            max_machine = max_machine.max(machine);
        }
        max_machine + self.comm_mean(config, cluster, workload)
    }

    /// Prepares cached samplers for one configuration so that repeated
    /// forward samples (the EI estimator draws hundreds) stay cheap.
    pub fn sampler<'m>(
        &'m self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
    ) -> ConfigSampler<'m> {
        // Distinct loads per device type, sorted; machines of the same type
        // with the same load share one sampled rate, which makes predictions
        // exactly invariant under permutation of same-type machines.
        type MachineInput = (usize, Vec<(DeviceType, u64)>, Option<(String, Vec<f64>)>);
        let mut type_loads: BTreeMap<DeviceType, Vec<u64>> = BTreeMap::new();
        let mut machine_inputs: Vec<MachineInput> = Vec::new();
        for (idx, a) in config.assignments.iter().enumerate() {
            if !a.is_worker() {
                continue;
            }
            let mut devices = Vec::new();
            for (slot, &load) in a.device_loads.iter().enumerate() {
                if load == 0 {
                    continue;
                }
                let Some(device_type) = slot_device_type(cluster, &a.machine_id, slot) else {
                    continue;
                };
                let entry = type_loads.entry(device_type.clone()).or_default();
                if !entry.contains(&load) {
                    entry.push(load);
                }
                devices.push((device_type, load));
            }
            let agg = if devices.len() > 1 {
                cluster
                    .type_of(&a.machine_id)
                    .map(|s| (s.type_name.clone(), agg_input(a)))
            } else {
                None
            };
            machine_inputs.push((idx, devices, agg));
        }
        for loads in type_loads.values_mut() {
            loads.sort_unstable();
        }

        let mut device_groups = Vec::new();
        for (device_type, loads) in &type_loads {
            let kind = match self.device_rates.get(device_type) {
                Some(RateModel::Fitted { gp }) => {
                    let points: Vec<Vec<f64>> = loads.iter().map(|&l| vec![l as f64]).collect();
                    match gp.joint_sampler(&points) {
                        Ok(s) => GroupKind::Joint(s),
                        Err(_) => GroupKind::Prior {
                            mean: RATE_FLOOR,
                            sd: 0.0,
                        },
                    }
                }
                Some(RateModel::Prior { mean, sd }) => GroupKind::Prior {
                    mean: *mean,
                    sd: *sd,
                },
                None => GroupKind::Prior {
                    mean: RATE_FLOOR,
                    sd: 0.0,
                },
            };
            let floors = match &kind {
                GroupKind::Joint(s) => s
                    .means()
                    .iter()
                    .map(|m| (RELATIVE_RATE_FLOOR * m).max(RATE_FLOOR))
                    .collect(),
                GroupKind::Prior { mean, .. } => {
                    vec![(RELATIVE_RATE_FLOOR * mean).max(RATE_FLOOR); loads.len()]
                }
            };
            device_groups.push(DeviceGroup {
                device_type: device_type.clone(),
                loads: loads.clone(),
                kind,
                floors,
            });
        }

        // Distinct aggregation inputs per machine type, lexicographically
        // sorted for the same permutation invariance.
        let mut agg_inputs: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for (_, _, agg) in &machine_inputs {
            if let Some((type_name, vector)) = agg {
                let entry = agg_inputs.entry(type_name.clone()).or_default();
                if !entry.contains(vector) {
                    entry.push(vector.clone());
                }
            }
        }
        for vectors in agg_inputs.values_mut() {
            vectors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        let mut agg_groups = Vec::new();
        for (type_name, vectors) in &agg_inputs {
            let kind = match self.agg_models.get(type_name) {
                Some(AggModel::Fitted { gp }) => match gp.joint_sampler(vectors) {
                    Ok(s) => GroupKind::Joint(s),
                    Err(_) => GroupKind::Prior { mean: 0.0, sd: 0.0 },
                },
                Some(AggModel::Prior { sd }) => GroupKind::Prior { mean: 0.0, sd: *sd },
                None => GroupKind::Prior { mean: 0.0, sd: 0.0 },
            };
            agg_groups.push(AggGroup {
                type_name: type_name.clone(),
                vectors: vectors.clone(),
                kind,
            });
        }

        let machines = machine_inputs
            .into_iter()
            .map(|(_, devices, agg)| {
                let device_slots = devices
                    .into_iter()
                    .map(|(device_type, load)| {
                        let g = device_groups
                            .iter()
                            .position(|d| d.device_type == device_type)
                            .unwrap();
                        let p = device_groups[g]
                            .loads
                            .iter()
                            .position(|&l| l == load)
                            .unwrap();
                        (g, p, load)
                    })
                    .collect();
                let agg_slot = agg.map(|(type_name, vector)| {
                    let g = agg_groups
                        .iter()
                        .position(|a| a.type_name == type_name)
                        .unwrap();
                    let p = agg_groups[g]
                        .vectors
                        .iter()
                        .position(|v| *v == vector)
                        .unwrap();
                    (g, p)
                });
                MachinePlan {
                    device_slots,
                    agg_slot,
                }
            })
            .collect();

        let obs = comm_obs_for(config, cluster, workload, 0.0);
        let entries: Vec<(usize, f64)> = obs
            .transfers
            .iter()
            .filter_map(|(name, mb)| {
                self.comm_particles
                    .type_names
                    .iter()
                    .position(|t| t == name)
                    .map(|i| (i, *mb))
            })
            .collect();
        let mut cumulative = Vec::with_capacity(self.comm_particles.len());
        let mut acc = 0.0;
        for &w in &self.comm_particles.weights {
            acc += w;
            cumulative.push(acc);
        }
        let residual = match &self.comm_residual_gp {
            Some(gp) => {
                let (mean, var) = gp.predict(&obs.features).unwrap_or((0.0, 0.0));
                (mean, var.sqrt())
            }
            None => (0.0, 0.0),
        };

        ConfigSampler {
            model: self,
            device_groups,
            agg_groups,
            machines,
            comm_entries: entries,
            comm_cumulative: cumulative,
            comm_residual: residual,
        }
    }

    /// One forward sample of the iteration time for `config`.
    pub fn sample_iteration_time(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        self.sampler(config, cluster, workload).sample(rng)
    }

    /// Monte Carlo mean of `k` forward samples over a stream derived from the
    /// configuration digest, so repeated calls agree exactly.
    pub fn predict_mean(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
        k: usize,
    ) -> f64 {
        assert!(k >= 1, "predict_mean needs at least one sample");
        let sampler = self.sampler(config, cluster, workload);
        let mut rng =
            rngutil::stream(&[0x4d43_4541, rngutil::hash_str(&config.digest()), k as u64]);
        (0..k).map(|_| sampler.sample(&mut rng)).sum::<f64>() / k as f64
    }

    /// Compact state summary for run logs: per-sub-model observation counts
    /// and the posterior-mean connection speeds.
    pub fn digest(&self) -> String {
        let devices: Vec<String> = self
            .device_rates
            .iter()
            .map(|(t, m)| match m {
                RateModel::Fitted { gp } => format!("{t}:n={}", gp.len()),
                RateModel::Prior { mean, .. } => format!("{t}:prior({mean:.0})"),
            })
            .collect();
        let aggs: Vec<String> = self
            .agg_models
            .iter()
            .map(|(t, m)| match m {
                AggModel::Fitted { gp } => format!("{t}:n={}", gp.len()),
                AggModel::Prior { .. } => format!("{t}:prior"),
            })
            .collect();
        let speeds: Vec<String> = self
            .comm_particles
            .type_names
            .iter()
            .zip(&self.mean_speeds)
            .map(|(t, s)| format!("{t}:{s:.1}"))
            .collect();
        format!(
            "obs={} devices[{}] agg[{}] speeds[{}] ess={:.0} uf={}",
            self.observation_count,
            devices.join(" "),
            aggs.join(" "),
            speeds.join(" "),
            self.comm_particles.ess(),
            self.comm_particles.underflow_recoveries,
        )
    }
}

/// Prior rate for a device type never observed: CPUs scale the nearest
/// observed CPU by hyperthread ratio, GPUs default to 8x the fastest
/// observed CPU.
fn prior_rate(
    device_type: &DeviceType,
    cluster: &ClusterSpec,
    mean_rates: &BTreeMap<DeviceType, f64>,
) -> f64 {
    let ht = |machine_type: &str| -> f64 {
        cluster
            .machine_type(machine_type)
            .map_or(1.0, |t| t.hyperthreads as f64)
    };
    let observed_cpus: Vec<(&DeviceType, f64, f64)> = mean_rates
        .iter()
        .filter_map(|(t, &rate)| match t {
            DeviceType::Cpu { machine_type } => Some((t, rate, ht(machine_type))),
            DeviceType::Gpu { .. } => None,
        })
        .collect();
    match device_type {
        DeviceType::Cpu { machine_type } => {
            let target_ht = ht(machine_type);
            observed_cpus
                .iter()
                .min_by(|a, b| {
                    let da = (a.2 - target_ht).abs();
                    let db = (b.2 - target_ht).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(_, rate, h)| rate * target_ht / h)
                .or_else(|| fallback_rate(mean_rates))
                .unwrap_or(1000.0)
        }
        DeviceType::Gpu { .. } => observed_cpus
            .iter()
            .map(|(_, rate, _)| *rate)
            .fold(None, |acc: Option<f64>, r| {
                Some(acc.map_or(r, |a| a.max(r)))
            })
            .map(|fastest| 8.0 * fastest)
            .or_else(|| fallback_rate(mean_rates))
            .unwrap_or(1000.0),
    }
}

fn fallback_rate(mean_rates: &BTreeMap<DeviceType, f64>) -> Option<f64> {
    mean_rates
        .values()
        .copied()
        .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
}

fn slot_device_type(cluster: &ClusterSpec, machine_id: &str, slot: usize) -> Option<DeviceType> {
    let spec = cluster.type_of(machine_id)?;
    if slot == 0 {
        Some(DeviceType::Cpu {
            machine_type: spec.type_name.clone(),
        })
    } else {
        spec.gpu_model
            .clone()
            .map(|model| DeviceType::Gpu { model })
    }
}

/// Aggregation GP input: CPU load first, then GPU loads sorted descending.
fn agg_input(assignment: &crate::domain::MachineAssignment) -> Vec<f64> {
    let mut gpu_loads: Vec<f64> = assignment
        .device_loads
        .iter()
        .skip(1)
        .map(|&l| l as f64)
        .collect();
    gpu_loads.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut v = vec![assignment.device_loads[0] as f64];
    v.extend(gpu_loads);
    v
}

#[derive(Debug, Clone)]
enum GroupKind {
    Joint(JointSampler),
    Prior { mean: f64, sd: f64 },
}

#[derive(Debug, Clone)]
struct DeviceGroup {
    device_type: DeviceType,
    loads: Vec<u64>,
    kind: GroupKind,
    /// Per-point sample floor: RELATIVE_RATE_FLOOR of the posterior mean.
    floors: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AggGroup {
    type_name: String,
    vectors: Vec<Vec<f64>>,
    kind: GroupKind,
}

#[derive(Debug, Clone)]
struct MachinePlan {
    /// (device group index, point index within the group, load)
    device_slots: Vec<(usize, usize, u64)>,
    agg_slot: Option<(usize, usize)>,
}

/// Forward sampler bound to one configuration; immutable and cheap to draw
/// from repeatedly.
pub struct ConfigSampler<'m> {
    model: &'m PerfModel,
    device_groups: Vec<DeviceGroup>,
    agg_groups: Vec<AggGroup>,
    machines: Vec<MachinePlan>,
    comm_entries: Vec<(usize, f64)>,
    comm_cumulative: Vec<f64>,
    comm_residual: (f64, f64),
}

impl ConfigSampler<'_> {
    /// Draws one iteration-time sample. The draw order is canonical (device
    /// types, then aggregation types, then communication), so configurations
    /// with identical load multisets consume identical randomness.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let rate_draws: Vec<Vec<f64>> = self
            .device_groups
            .iter()
            .map(|g| match &g.kind {
                GroupKind::Joint(s) => s.draw(rng),
                GroupKind::Prior { mean, sd } => g
                    .loads
                    .iter()
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        mean + sd * z
                    })
                    .collect(),
            })
            .collect();
        let agg_draws: Vec<Vec<f64>> = self
            .agg_groups
            .iter()
            .map(|g| match &g.kind {
                GroupKind::Joint(s) => s.draw(rng),
                GroupKind::Prior { mean, sd } => g
                    .vectors
                    .iter()
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        mean + sd * z
                    })
                    .collect(),
            })
            .collect();

        let mut max_machine: f64 = 0.0;
        for plan in &self.machines {
            let mut machine: f64 = 0.0;
            for &(g, p, load) in &plan.device_slots {
                let rate = rate_draws[g][p].max(self.device_groups[g].floors[p]);
                machine = machine.max(load as f64 / rate);
            }
            if let Some((g, p)) = plan.agg_slot {
                machine += agg_draws[g][p].max(0.0);
            }
            max_machine = max_machine.max(machine);
        }

        let comm = self.sample_comm(rng);
        (max_machine + comm).max(0.0)
    }

    fn sample_comm(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        let idx = match self
            .comm_cumulative
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.min(self.comm_cumulative.len() - 1),
        };
        let speeds = &self.model.comm_particles.particles[idx];
        let parametric = self
            .comm_entries
            .iter()
            .map(|&(t, mb)| mb / speeds[t])
            .fold(0.0, f64::max);
        let z: f64 = rng.sample(StandardNormal);
        let residual = self.comm_residual.0 + self.comm_residual.1 * z;
        (parametric + residual).max(0.0)
    }
}
