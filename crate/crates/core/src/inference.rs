//! Observation routing and particle inference for the communication model.
//!
//! Each evaluated configuration yields many measurements besides the
//! objective: per-device times, per-machine times and a communication time.
//! The sub-models are conditionally independent given those, so `route`
//! splits a [`Measurement`] into three buffers: device-rate observations,
//! aggregation-difference observations, and one communication observation.
//!
//! Connection speeds (one per machine type) are inferred from the
//! communication observations with a sequential Monte Carlo filter:
//! reweight by the Gaussian likelihood of the residual against the
//! parametric `max(transfer / speed)` prediction, systematic resampling once
//! the effective sample size halves, then Metropolis-corrected random-walk
//! rejuvenation in log-speed space against all observations seen so far (the
//! plain walk would smear dimensions the latest observation says nothing
//! about).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{ClusterSpec, Configuration, DeviceType, WorkloadSpec};
use crate::gp::GpPosterior;
use crate::simulator::{transfer_mb, Measurement};

/// Processing-rate observation for one device type.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceObs {
    pub device_type: DeviceType,
    pub load: u64,
    /// inputs per second: load / measured device time
    pub rate: f64,
}

/// Aggregation-cost observation for one multi-device machine.
#[derive(Debug, Clone, PartialEq)]
pub struct AggObs {
    pub machine_type: String,
    /// CPU load first, then GPU loads sorted descending.
    pub load_vector: Vec<f64>,
    /// machine time minus its slowest device time
    pub agg_diff: f64,
}

/// One communication observation: per-machine transfer amounts plus the
/// residual-GP features derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommObs {
    /// (machine type name, MB moved) for every machine with traffic.
    pub transfers: Vec<(String, f64)>,
    /// (max transfer / model size, total transfer MB, worker count)
    pub features: [f64; 3],
    pub comm_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RoutedObservations {
    pub device_obs: Vec<DeviceObs>,
    pub agg_obs: Vec<AggObs>,
    pub comm_obs: Vec<CommObs>,
}

impl RoutedObservations {
    pub fn merge(&mut self, other: RoutedObservations) {
        self.device_obs.extend(other.device_obs);
        self.agg_obs.extend(other.agg_obs);
        self.comm_obs.extend(other.comm_obs);
    }
}

/// Residual-GP features of a configuration's communication pattern.
pub fn comm_features(config: &Configuration, workload: &WorkloadSpec) -> [f64; 3] {
    let mut max_mb: f64 = 0.0;
    let mut total_mb = 0.0;
    for a in &config.assignments {
        let mb = transfer_mb(config, &a.machine_id, workload);
        max_mb = max_mb.max(mb);
        total_mb += mb;
    }
    [
        max_mb / workload.model_size_mb,
        total_mb,
        config.worker_count() as f64,
    ]
}

/// Builds the communication observation for a configuration; `comm_time` may
/// be a measurement or a prediction target.
pub fn comm_obs_for(
    config: &Configuration,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    comm_time: f64,
) -> CommObs {
    let mut transfers = Vec::new();
    for m in &cluster.machines {
        let mb = transfer_mb(config, &m.id, workload);
        if mb > 0.0 {
            transfers.push((m.type_name.clone(), mb));
        }
    }
    CommObs {
        transfers,
        features: comm_features(config, workload),
        comm_time,
    }
}

/// Splits one measurement into per-sub-model observations. Every device with
/// positive load yields exactly one rate observation; machines running more
/// than one device yield an aggregation observation; the whole measurement
/// yields one communication observation.
pub fn route(
    measurement: &Measurement,
    config: &Configuration,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
) -> RoutedObservations {
    let mut routed = RoutedObservations::default();

    for (device, load) in config.device_loads() {
        if load == 0 {
            continue;
        }
        let Some(&time) = measurement.device_times.get(&device) else {
            continue;
        };
        if time <= 0.0 {
            continue;
        }
        let Ok(device_type) = cluster.device_type(&device) else {
            continue;
        };
        routed.device_obs.push(DeviceObs {
            device_type,
            load,
            rate: load as f64 / time,
        });
    }

    for a in &config.assignments {
        let active = a.device_loads.iter().filter(|&&l| l > 0).count();
        if active <= 1 {
            continue;
        }
        let Some(&machine_time) = measurement.machine_times.get(&a.machine_id) else {
            continue;
        };
        let max_device = measurement
            .device_times
            .iter()
            .filter(|(d, _)| d.machine_id == a.machine_id)
            .map(|(_, &t)| t)
            .fold(0.0_f64, f64::max);
        let Some(spec) = cluster.type_of(&a.machine_id) else {
            continue;
        };
        let mut gpu_loads: Vec<f64> = a.device_loads.iter().skip(1).map(|&l| l as f64).collect();
        gpu_loads.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let mut load_vector = vec![a.device_loads[0] as f64];
        load_vector.extend(gpu_loads);
        routed.agg_obs.push(AggObs {
            machine_type: spec.type_name.clone(),
            load_vector,
            agg_diff: machine_time - max_device,
        });
    }

    routed.comm_obs.push(comm_obs_for(
        config,
        cluster,
        workload,
        measurement.comm_time,
    ));
    routed
}

/// Log-uniform prior over the per-machine-type connection speeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedPrior {
    /// Sorted machine type names; particle coordinates follow this order.
    pub type_names: Vec<String>,
    pub lo_mb_per_s: f64,
    pub hi_mb_per_s: f64,
}

impl SpeedPrior {
    pub fn new(type_names: Vec<String>) -> Self {
        SpeedPrior {
            type_names,
            lo_mb_per_s: 10.0,
            hi_mb_per_s: 10_000.0,
        }
    }

    pub fn for_cluster(cluster: &ClusterSpec) -> Self {
        Self::new(cluster.machine_type_names())
    }

    fn log_range(&self) -> f64 {
        (self.hi_mb_per_s / self.lo_mb_per_s).ln()
    }
}

/// Weighted particle approximation to the connection-speed posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub type_names: Vec<String>,
    /// One speed (MB/s) per type name, per particle.
    pub particles: Vec<Vec<f64>>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    /// Times the likelihood underflowed and the update fell back to a widened
    /// noise floor; surfaced in the run log.
    pub underflow_recoveries: u32,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Effective sample size `1 / sum(w^2)`.
    pub fn ess(&self) -> f64 {
        let sum_sq: f64 = self.weights.iter().map(|w| w * w).sum();
        if sum_sq > 0.0 {
            1.0 / sum_sq
        } else {
            0.0
        }
    }

    /// Weighted posterior mean speed per machine type.
    pub fn posterior_mean(&self) -> Vec<f64> {
        let dim = self.type_names.len();
        let mut mean = vec![0.0; dim];
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            for d in 0..dim {
                mean[d] += w * p[d];
            }
        }
        mean
    }

    /// Weighted posterior standard deviation per machine type.
    pub fn posterior_std(&self) -> Vec<f64> {
        let mean = self.posterior_mean();
        let dim = self.type_names.len();
        let mut var = vec![0.0; dim];
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            for d in 0..dim {
                var[d] += w * (p[d] - mean[d]).powi(2);
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    fn type_index(&self, name: &str) -> Option<usize> {
        self.type_names.iter().position(|t| t == name)
    }
}

/// Draws `n` particles from the log-uniform prior with uniform weights.
pub fn init_particles(n: usize, prior: &SpeedPrior, rng: &mut ChaCha8Rng) -> ParticleSet {
    assert!(
        n >= 100,
        "particle filter needs at least 100 particles, got {n}"
    );
    let dim = prior.type_names.len();
    let log_lo = prior.lo_mb_per_s.ln();
    let log_range = prior.log_range();
    let particles = (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| (log_lo + rng.random::<f64>() * log_range).exp())
                .collect()
        })
        .collect();
    ParticleSet {
        type_names: prior.type_names.clone(),
        particles,
        weights: vec![1.0 / n as f64; n],
        underflow_recoveries: 0,
    }
}

/// Parametric communication prediction under one particle:
/// `max(transfer / speed)` over the transferring machines.
fn parametric_comm(speeds: &[f64], entries: &[(usize, f64)]) -> f64 {
    entries
        .iter()
        .map(|&(idx, mb)| mb / speeds[idx])
        .fold(0.0, f64::max)
}

/// Same parametric prediction, resolving machine types by name against
/// `type_names` (the particle coordinate order).
pub fn parametric_comm_for(speeds: &[f64], type_names: &[String], obs: &CommObs) -> f64 {
    obs.transfers
        .iter()
        .filter_map(|(name, mb)| {
            type_names
                .iter()
                .position(|t| t == name)
                .map(|i| mb / speeds[i])
        })
        .fold(0.0, f64::max)
}

struct IndexedObs {
    entries: Vec<(usize, f64)>,
    comm_time: f64,
    gp_mean: f64,
    /// residual-GP variance plus the squared observation noise floor
    base_var: f64,
}

fn index_obs(ps: &ParticleSet, obs: &CommObs, residual_gp: Option<&GpPosterior>) -> IndexedObs {
    let entries = obs
        .transfers
        .iter()
        .filter_map(|(name, mb)| ps.type_index(name).map(|i| (i, *mb)))
        .collect();
    let (gp_mean, gp_var) = match residual_gp {
        Some(gp) => gp.predict(&obs.features).unwrap_or((0.0, 0.0)),
        None => (0.0, 0.0),
    };
    let floor = noise_floor(obs.comm_time);
    IndexedObs {
        entries,
        comm_time: obs.comm_time,
        gp_mean,
        base_var: gp_var + floor * floor,
    }
}

/// Observation noise floor: 1% of the observed communication time, at least
/// one millisecond.
fn noise_floor(comm_time: f64) -> f64 {
    (0.01 * comm_time).max(0.001)
}

fn log_likelihood(speeds: &[f64], obs: &IndexedObs, extra_floor_factor: f64) -> f64 {
    let var = obs.base_var * extra_floor_factor * extra_floor_factor;
    let resid = obs.comm_time - parametric_comm(speeds, &obs.entries) - obs.gp_mean;
    -0.5 * resid * resid / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

/// Incorporates one communication observation. `history` holds the
/// observations already folded into `ps`; the rejuvenation move targets the
/// posterior over all of them. Returns the updated particle set.
pub fn update(
    ps: &ParticleSet,
    obs: &CommObs,
    residual_gp: Option<&GpPosterior>,
    history: &[CommObs],
    prior: &SpeedPrior,
    rng: &mut ChaCha8Rng,
) -> ParticleSet {
    let mut out = ps.clone();
    let indexed = index_obs(ps, obs, residual_gp);
    let n = out.len();

    // Reweight, widening the noise floor tenfold on likelihood underflow.
    let mut widen = 1.0;
    let mut reweighted = false;
    for attempt in 0..8u32 {
        let mut weights: Vec<f64> = out
            .particles
            .iter()
            .zip(&out.weights)
            .map(|(p, &w)| w * log_likelihood(p, &indexed, widen).exp())
            .collect();
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            for w in &mut weights {
                *w /= sum;
            }
            out.weights = weights;
            if attempt > 0 {
                out.underflow_recoveries += attempt;
                log::warn!(
                    "comm likelihood underflow: noise floor widened x{widen} before reweighting"
                );
            }
            reweighted = true;
            break;
        }
        widen *= 10.0;
    }
    if !reweighted {
        out.underflow_recoveries += 1;
        log::warn!("comm likelihood underflow unrecoverable; falling back to uniform weights");
        out.weights = vec![1.0 / n as f64; n];
    }

    if out.ess() < n as f64 / 2.0 {
        systematic_resample(&mut out, rng);
        rejuvenate(&mut out, obs, history, residual_gp, prior, rng);
    }
    out
}

fn systematic_resample(ps: &mut ParticleSet, rng: &mut ChaCha8Rng) {
    let n = ps.len();
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in &ps.weights {
        acc += w;
        cumulative.push(acc);
    }
    let start: f64 = rng.random::<f64>() / n as f64;
    let mut picked = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let u = start + k as f64 / n as f64;
        while j < n - 1 && cumulative[j] < u {
            j += 1;
        }
        picked.push(ps.particles[j].clone());
    }
    ps.particles = picked;
    ps.weights = vec![1.0 / n as f64; n];
}

const REJUVENATION_SWEEPS: usize = 3;

/// Metropolis random-walk rejuvenation in log-speed space, step 5% of the
/// prior log range, targeting the posterior over every observation seen so
/// far. Coordinates move one at a time; joint proposals would be rejected
/// almost surely once several speeds are pinned by data.
fn rejuvenate(
    ps: &mut ParticleSet,
    obs: &CommObs,
    history: &[CommObs],
    residual_gp: Option<&GpPosterior>,
    prior: &SpeedPrior,
    rng: &mut ChaCha8Rng,
) {
    let step = 0.05 * prior.log_range();
    let dim = prior.type_names.len();
    let indexed: Vec<IndexedObs> = history
        .iter()
        .chain(std::iter::once(obs))
        .map(|o| index_obs(ps, o, residual_gp))
        .collect();
    let target = |speeds: &[f64]| -> f64 {
        for &s in speeds {
            if s < prior.lo_mb_per_s || s > prior.hi_mb_per_s {
                return f64::NEG_INFINITY;
            }
        }
        indexed.iter().map(|o| log_likelihood(speeds, o, 1.0)).sum()
    };
    for particle in &mut ps.particles {
        let mut current = target(particle);
        for _ in 0..REJUVENATION_SWEEPS {
            for d in 0..dim {
                let old = particle[d];
                let z: f64 = rng.sample(StandardNormal);
                particle[d] = old * (step * z).exp();
                let proposed = target(particle);
                let accept = proposed - current;
                if accept >= 0.0 || rng.random::<f64>() < accept.exp() {
                    current = proposed;
                } else {
                    particle[d] = old;
                }
            }
        }
    }
}

/// One forward sample of communication time: a particle drawn by weight gives
/// the parametric part, the residual GP contributes a Gaussian draw at the
/// configuration's transfer features. Clamped at zero.
pub fn predict_comm(
    ps: &ParticleSet,
    residual_gp: Option<&GpPosterior>,
    config: &Configuration,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let obs = comm_obs_for(config, cluster, workload, 0.0);
    let entries: Vec<(usize, f64)> = obs
        .transfers
        .iter()
        .filter_map(|(name, mb)| ps.type_index(name).map(|i| (i, *mb)))
        .collect();

    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut idx = ps.len() - 1;
    for (i, &w) in ps.weights.iter().enumerate() {
        acc += w;
        if u <= acc {
            idx = i;
            break;
        }
    }
    let parametric = parametric_comm(&ps.particles[idx], &entries);

    let residual = match residual_gp {
        Some(gp) => {
            let (mean, var) = gp.predict(&obs.features).unwrap_or((0.0, 0.0));
            let z: f64 = rng.sample(StandardNormal);
            mean + var.sqrt() * z
        }
        None => 0.0,
    };
    (parametric + residual).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{config_from_parts, uniform_devices, DeviceRef};
    use crate::rngutil;
    use crate::simulator::{make_setting, run_experiment};
    use std::collections::{BTreeMap, BTreeSet};

    fn noiseless_gamma0(cluster: &mut ClusterSpec) {
        let p = cluster.sim_params.as_mut().unwrap();
        p.noise_sigma = 0.0;
        p.warmup_inflation = 1.0;
        p.congestion_gamma = 0.0;
    }

    #[test]
    fn route_counts_match_active_devices() {
        let (mut cluster, workload) = make_setting('C', "speechnet", 8192).unwrap();
        noiseless_gamma0(&mut cluster);
        // Both g2 machines run CPU+GPU: two aggregation observations.
        let mut loads = BTreeMap::new();
        loads.insert(DeviceRef::cpu("m00"), 96_u64);
        loads.insert(DeviceRef::gpu("m00", 0), 4000);
        loads.insert(DeviceRef::cpu("m01"), 96);
        loads.insert(DeviceRef::gpu("m01", 0), 4000);
        let ps: BTreeSet<String> = ["m00".to_string()].into();
        let config = config_from_parts(&cluster, &loads, &ps);
        let m = run_experiment(&config, &cluster, &workload, 1).unwrap();
        let routed = route(&m, &config, &cluster, &workload);
        assert_eq!(routed.device_obs.len(), 4);
        assert_eq!(routed.agg_obs.len(), 2);
        assert_eq!(routed.comm_obs.len(), 1);
        for o in &routed.agg_obs {
            assert_eq!(o.machine_type, "g2.2xlarge");
            assert_eq!(o.load_vector, vec![96.0, 4000.0]);
            assert!(o.agg_diff > 0.0);
        }
    }

    #[test]
    fn route_single_machine_single_device() {
        let (mut cluster, workload) = make_setting('A', "googlenet", 64).unwrap();
        noiseless_gamma0(&mut cluster);
        let mut loads = BTreeMap::new();
        loads.insert(DeviceRef::cpu("m08"), 64_u64);
        let ps: BTreeSet<String> = ["m08".to_string()].into();
        let config = config_from_parts(&cluster, &loads, &ps);
        let m = run_experiment(&config, &cluster, &workload, 1).unwrap();
        let routed = route(&m, &config, &cluster, &workload);
        assert_eq!(routed.device_obs.len(), 1);
        assert_eq!(routed.agg_obs.len(), 0);
        assert_eq!(routed.comm_obs.len(), 1);
        assert_eq!(routed.comm_obs[0].comm_time, 0.0);
        assert!(routed.comm_obs[0].transfers.is_empty());
    }

    #[test]
    fn device_observation_count_equals_loaded_devices() {
        let (cluster, workload) = make_setting('B', "googlenet", 128).unwrap();
        let mut rng = rngutil::stream(&[3]);
        for seed in 0..20 {
            let config = crate::domain::sample_random(&cluster, &workload, &mut rng);
            let m = run_experiment(&config, &cluster, &workload, seed).unwrap();
            let routed = route(&m, &config, &cluster, &workload);
            let loaded = config.device_loads().iter().filter(|(_, l)| *l > 0).count();
            assert_eq!(routed.device_obs.len(), loaded);
        }
    }

    #[test]
    fn init_particles_uniform_weights_in_support() {
        let prior = SpeedPrior::new(vec!["a".into(), "b".into()]);
        let ps = init_particles(1000, &prior, &mut rngutil::stream(&[5]));
        assert!((ps.ess() - 1000.0).abs() < 1e-9, "ess {}", ps.ess());
        for p in &ps.particles {
            for &s in p {
                assert!((10.0..=10_000.0).contains(&s));
            }
        }
        let again = init_particles(1000, &prior, &mut rngutil::stream(&[5]));
        assert_eq!(ps, again);
    }

    /// Worker/PS pairs of the same machine type pin that type's speed
    /// exactly; rotating over the types identifies the full vector.
    fn recovery_obs(cluster: &ClusterSpec, workload: &WorkloadSpec, count: usize) -> Vec<CommObs> {
        let by_type: BTreeMap<String, Vec<String>> = {
            let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for machine in &cluster.machines {
                m.entry(machine.type_name.clone())
                    .or_default()
                    .push(machine.id.clone());
            }
            m
        };
        let pairs: Vec<(&String, &Vec<String>)> =
            by_type.iter().filter(|(_, ids)| ids.len() >= 2).collect();
        let mut out = Vec::new();
        let mut k = 0;
        while out.len() < count {
            let (_, ids) = pairs[k % pairs.len()];
            let mut loads = BTreeMap::new();
            loads.insert(DeviceRef::cpu(ids[0].clone()), workload.batch_size);
            let ps_set: BTreeSet<String> = [ids[1].clone()].into();
            let config = config_from_parts(cluster, &loads, &ps_set);
            let m = run_experiment(&config, cluster, workload, 1000 + out.len() as u64).unwrap();
            out.push(route(&m, &config, cluster, workload).comm_obs.remove(0));
            k += 1;
        }
        out
    }

    #[test]
    fn particles_recover_known_speeds() {
        let (mut cluster, workload) = make_setting('C', "googlenet", 256).unwrap();
        noiseless_gamma0(&mut cluster);
        let observations = recovery_obs(&cluster, &workload, 20);
        let prior = SpeedPrior::for_cluster(&cluster);
        let mut rng = rngutil::stream(&[77]);
        let mut ps = init_particles(1000, &prior, &mut rng);
        let mut seen: Vec<CommObs> = Vec::new();
        for obs in &observations {
            ps = update(&ps, obs, None, &seen, &prior, &mut rng);
            seen.push(obs.clone());
        }
        let truth = &cluster.sim_params.as_ref().unwrap().machine_types;
        for (name, mean) in ps.type_names.iter().zip(ps.posterior_mean()) {
            let t = truth[name].connection_speed_mb_per_s;
            let rel = (mean - t).abs() / t;
            assert!(
                rel <= 0.10,
                "{name}: posterior mean {mean} vs truth {t} ({rel:.3})"
            );
        }
        let weight_sum: f64 = ps.weights.iter().sum();
        assert!((weight_sum - 1.0).abs() < 1e-9);
        assert!(ps.ess() >= 1.0 && ps.ess() <= ps.len() as f64 + 1e-9);
    }

    #[test]
    fn update_without_information_keeps_weights() {
        // Zero-transfer observation carries no information: weights stay put.
        let prior = SpeedPrior::new(vec!["x".into()]);
        let mut rng = rngutil::stream(&[8]);
        let ps = init_particles(200, &prior, &mut rng);
        let obs = CommObs {
            transfers: vec![],
            features: [0.0, 0.0, 1.0],
            comm_time: 0.0,
        };
        let updated = update(&ps, &obs, None, &[], &prior, &mut rng);
        for (a, b) in updated.weights.iter().zip(&ps.weights) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(updated.particles, ps.particles);
    }

    #[test]
    fn posterior_contracts_over_observation_count() {
        // Sequence rotates over the three machine types; checkpoints sit
        // after each full rotation so every speed saw one more observation.
        let (mut cluster, workload) = make_setting('A', "googlenet", 256).unwrap();
        noiseless_gamma0(&mut cluster);
        let prior = SpeedPrior::for_cluster(&cluster);
        let n_types = prior.type_names.len();
        let cycles = 4;
        let observations = recovery_obs(&cluster, &workload, n_types * cycles);
        let mut avg_std = vec![vec![0.0; n_types]; cycles + 1];
        let seeds = 10;
        for seed in 0..seeds {
            let mut rng = rngutil::stream(&[100 + seed]);
            let mut ps = init_particles(500, &prior, &mut rng);
            let mut seen: Vec<CommObs> = Vec::new();
            for (d, s) in ps.posterior_std().iter().enumerate() {
                avg_std[0][d] += s / seeds as f64;
            }
            for (i, obs) in observations.iter().enumerate() {
                ps = update(&ps, obs, None, &seen, &prior, &mut rng);
                seen.push(obs.clone());
                if (i + 1) % n_types == 0 {
                    for (d, s) in ps.posterior_std().iter().enumerate() {
                        avg_std[(i + 1) / n_types][d] += s / seeds as f64;
                    }
                }
            }
        }
        for step in avg_std.windows(2) {
            for (d, (before, after)) in step[0].iter().zip(&step[1]).enumerate() {
                assert!(
                    *after <= before * 1.10,
                    "posterior std grew: {before} -> {after} (dim {d})"
                );
            }
        }
    }

    #[test]
    fn duplicated_observation_shrinks_posterior_variance() {
        let (mut cluster, workload) = make_setting('A', "googlenet", 256).unwrap();
        noiseless_gamma0(&mut cluster);
        let prior = SpeedPrior::for_cluster(&cluster);
        let obs = recovery_obs(&cluster, &workload, 1).remove(0);
        let dim = obs.transfers[0].0.clone();
        let d = prior.type_names.iter().position(|t| *t == dim).unwrap();
        let mut rng = rngutil::stream(&[55]);
        let mut ps = init_particles(1000, &prior, &mut rng);
        let std0 = ps.posterior_std()[d];
        ps = update(&ps, &obs, None, &[], &prior, &mut rng);
        let std1 = ps.posterior_std()[d];
        ps = update(
            &ps,
            &obs,
            None,
            std::slice::from_ref(&obs),
            &prior,
            &mut rng,
        );
        let std2 = ps.posterior_std()[d];
        assert!(std1 < std0, "{std1} !< {std0}");
        assert!(std2 <= std1 * 1.10, "{std2} !<= {std1}");
    }

    #[test]
    fn predict_comm_degenerate_cases() {
        let (mut cluster, workload) = make_setting('A', "googlenet", 64).unwrap();
        noiseless_gamma0(&mut cluster);
        let prior = SpeedPrior::for_cluster(&cluster);
        let mut rng = rngutil::stream(&[13]);
        let ps = init_particles(200, &prior, &mut rng);

        // Single worker+PS machine: no transfers, prediction is exactly zero
        // without a residual GP.
        let mut loads = BTreeMap::new();
        loads.insert(DeviceRef::cpu("m00"), 64_u64);
        let set: BTreeSet<String> = ["m00".to_string()].into();
        let solo = config_from_parts(&cluster, &loads, &set);
        let p = predict_comm(&ps, None, &solo, &cluster, &workload, &mut rng);
        assert_eq!(p, 0.0);

        // Uniform config: prediction equals transfer/speed of the sampled
        // particle, always non-negative.
        let config = uniform_devices(&cluster, &workload).unwrap();
        for _ in 0..50 {
            let p = predict_comm(&ps, None, &config, &cluster, &workload, &mut rng);
            assert!(p >= 0.0);
        }
    }

    #[test]
    fn predict_comm_mean_matches_weighted_parametric_value() {
        let (mut cluster, workload) = make_setting('A', "googlenet", 64).unwrap();
        noiseless_gamma0(&mut cluster);
        let prior = SpeedPrior::for_cluster(&cluster);
        let mut rng = rngutil::stream(&[14]);
        let ps = init_particles(300, &prior, &mut rng);
        let config = uniform_devices(&cluster, &workload).unwrap();

        let obs = comm_obs_for(&config, &cluster, &workload, 0.0);
        let entries: Vec<(usize, f64)> = obs
            .transfers
            .iter()
            .map(|(name, mb)| (ps.type_index(name).unwrap(), *mb))
            .collect();
        let expected: f64 = ps
            .particles
            .iter()
            .zip(&ps.weights)
            .map(|(p, &w)| w * parametric_comm(p, &entries))
            .sum();
        let k = 10_000;
        let draws: Vec<f64> = (0..k)
            .map(|_| predict_comm(&ps, None, &config, &cluster, &workload, &mut rng))
            .collect();
        let mc_mean = draws.iter().sum::<f64>() / k as f64;
        let mc_var = draws.iter().map(|d| (d - mc_mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        let se = (mc_var / k as f64).sqrt();
        assert!(
            (mc_mean - expected).abs() <= 3.0 * se + 1e-12,
            "mc mean {mc_mean} vs expected {expected} (se {se})"
        );
    }
}
