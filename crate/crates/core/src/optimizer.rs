//! Bayesian-optimization loop and baselines.
//!
//! The bespoke optimizer seeds with the two uniform configurations (so the
//! model sees every device type immediately), then alternates: fit the
//! structured performance model on the full history, propose the next
//! configuration by maximizing sampled expected improvement over candidate
//! worker/PS flag patterns whose loads were individually optimized, and
//! evaluate it on the cluster. The generic baseline runs the same protocol
//! with a single flat GP over the encoded configuration vector; the simple
//! baselines evaluate fixed or random configurations.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    self, encode, encode_dim, ClusterSpec, Configuration, DomainError, WorkloadSpec,
};
use crate::gp::{self, GpError};
use crate::perf_model::{ModelError, PerfModel};
use crate::rngutil;
use crate::simulator::{self, Measurement, SimError};

#[derive(Debug, Error)]
pub enum OptError {
    #[error("optimization budget must be at least 3, got {0}")]
    BudgetTooSmall(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Optimization method being run or recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bespoke,
    GenericGp,
    Random,
    UniformDevices,
    UniformGpus,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bespoke => "bespoke",
            Method::GenericGp => "generic_gp",
            Method::Random => "random",
            Method::UniformDevices => "uniform_devices",
            Method::UniformGpus => "uniform_gpus",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bespoke" => Ok(Method::Bespoke),
            "generic_gp" | "generic" => Ok(Method::GenericGp),
            "random" => Ok(Method::Random),
            "uniform_devices" => Ok(Method::UniformDevices),
            "uniform_gpus" => Ok(Method::UniformGpus),
            other => Err(format!("unknown method {other}")),
        }
    }
}

/// One evaluated point of an optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub config: Configuration,
    pub measurement: Measurement,
    pub best_so_far: f64,
    pub wall_time_s: f64,
    pub model_digest: String,
}

/// Full trajectory of one optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptRun {
    pub method: Method,
    pub seed: u64,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl OptRun {
    pub fn best(&self) -> f64 {
        self.trajectory
            .last()
            .map_or(f64::INFINITY, |p| p.best_so_far)
    }

    pub fn best_config(&self) -> Option<&Configuration> {
        let best = self.best();
        self.trajectory
            .iter()
            .find(|p| p.measurement.objective == best)
            .map(|p| &p.config)
    }

    /// Best objective after the first `k` evaluations.
    pub fn best_at(&self, k: usize) -> f64 {
        self.trajectory
            .iter()
            .take(k)
            .map(|p| p.measurement.objective)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Budgets for the acquisition search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    /// Forward samples per expected-improvement estimate.
    pub ei_samples: usize,
    /// Worker/PS flag patterns tried per proposal.
    pub candidate_subsets: usize,
    /// Per-machine line-search sweeps in load optimization.
    pub coordinate_passes: usize,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        AcquisitionParams {
            ei_samples: 128,
            candidate_subsets: 64,
            coordinate_passes: 3,
        }
    }
}

/// Anything that can forward-sample an iteration time for a configuration.
/// The mean is what load optimization steers by; for the perfect-model
/// oracle both collapse to the exact simulated time.
pub trait IterationModel: Sync {
    fn sample_time(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
        rng: &mut ChaCha8Rng,
    ) -> f64;

    fn mean_time(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
    ) -> f64;
}

impl IterationModel for PerfModel {
    fn sample_time(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        self.sample_iteration_time(config, cluster, workload, rng)
    }

    fn mean_time(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
    ) -> f64 {
        self.mean_path(config, cluster, workload)
    }
}

/// The simulator's exact noiseless objective, used as a perfect model in
/// oracle tests of the load optimizer.
pub struct PerfectModel;

impl IterationModel for PerfectModel {
    fn sample_time(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
        _rng: &mut ChaCha8Rng,
    ) -> f64 {
        self.mean_time(config, cluster, workload)
    }

    fn mean_time(
        &self,
        config: &Configuration,
        cluster: &ClusterSpec,
        workload: &WorkloadSpec,
    ) -> f64 {
        simulator::noiseless_objective(config, cluster, workload).unwrap_or(f64::INFINITY)
    }
}

/// Monte Carlo expected improvement: mean of `max(0, best - sample)` over
/// `ei_samples` forward samples.
pub fn expected_improvement(
    model: &dyn IterationModel,
    config: &Configuration,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    best: f64,
    params: &AcquisitionParams,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let k = params.ei_samples.max(1);
    let mut acc = 0.0;
    for _ in 0..k {
        let sample = model.sample_time(config, cluster, workload, rng);
        acc += (best - sample).max(0.0);
    }
    acc / k as f64
}

/// Optimizes the per-device load split for a fixed worker/PS flag pattern:
/// greedy water-filling in batch/64 chunks (each chunk goes to the device
/// whose predicted mean grows least), then `coordinate_passes` sweeps that
/// line-search each machine's share on an 11-point multiplicative grid in
/// [0.5, 2] and renormalize to the batch size. Workers optimized to zero
/// load drop out of the worker set. Deterministic.
pub fn optimize_loads(
    model: &dyn IterationModel,
    worker_set: &BTreeSet<String>,
    ps_set: &BTreeSet<String>,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    params: &AcquisitionParams,
) -> Configuration {
    let batch = workload.batch_size;
    let chunk = batch.div_ceil(64);

    let mut config = Configuration::empty(cluster);
    for a in &mut config.assignments {
        a.is_ps = ps_set.contains(&a.machine_id);
    }
    let devices: Vec<crate::domain::DeviceRef> = cluster
        .devices()
        .into_iter()
        .filter(|d| worker_set.contains(&d.machine_id))
        .collect();
    if devices.is_empty() {
        return config;
    }

    // Water-filling initialization.
    let mut remaining = batch;
    while remaining > 0 {
        let grain = chunk.min(remaining);
        let mut best: Option<(f64, usize)> = None;
        for (i, d) in devices.iter().enumerate() {
            let mut probe = config.clone();
            probe.set_load(d, probe.load_of(d) + grain);
            let t = model.mean_time(&probe, cluster, workload);
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
        let (_, pick) = best.expect("at least one device");
        let d = &devices[pick];
        config.set_load(d, config.load_of(d) + grain);
        remaining -= grain;
    }

    let mut best_config = config.clone();
    let mut best_time = model.mean_time(&best_config, cluster, workload);

    let factors: Vec<f64> = (0..11)
        .map(|i| 0.5 * (4.0_f64).powf(i as f64 / 10.0))
        .collect();
    let machine_ids: Vec<String> = {
        let ids: BTreeSet<&String> = devices.iter().map(|d| &d.machine_id).collect();
        ids.into_iter().cloned().collect()
    };

    for _ in 0..params.coordinate_passes.max(1) {
        for machine_id in &machine_ids {
            let current: Vec<u64> = config
                .assignment(machine_id)
                .map(|a| a.device_loads.clone())
                .unwrap_or_default();
            if current.iter().sum::<u64>() == 0 {
                continue;
            }
            let mut best_factor = (model.mean_time(&config, cluster, workload), None);
            for &f in &factors {
                if (f - 1.0).abs() < 1e-9 {
                    continue;
                }
                let mut probe = config.clone();
                if let Some(a) = probe.assignment_mut(machine_id) {
                    for l in &mut a.device_loads {
                        *l = (*l as f64 * f).round() as u64;
                    }
                }
                let t = model.mean_time(&probe, cluster, workload);
                if t < best_factor.0 {
                    best_factor = (t, Some(probe));
                }
            }
            if let (_, Some(probe)) = best_factor {
                config = probe;
            }
        }
        // Renormalize to the batch constraint after the sweep.
        let weights: Vec<f64> = config
            .device_loads()
            .iter()
            .map(|(_, l)| *l as f64)
            .collect();
        if let Some(loads) = domain::largest_remainder(&weights, batch) {
            let all_devices = cluster.devices();
            for (d, l) in all_devices.iter().zip(loads) {
                config.set_load(d, l);
            }
        } else {
            config = best_config.clone();
        }
        let t = model.mean_time(&config, cluster, workload);
        if t < best_time {
            best_time = t;
            best_config = config.clone();
        }
    }
    best_config
}

/// Candidate worker/PS flag patterns for one proposal round: the incumbent's
/// pattern, its single-flag mutations, and random patterns (half with
/// Bernoulli membership, half size-uniform so small worker sets get tried).
fn flag_patterns(
    incumbent: &Configuration,
    cluster: &ClusterSpec,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(BTreeSet<String>, BTreeSet<String>)> {
    let ids: Vec<String> = cluster.machines.iter().map(|m| m.id.clone()).collect();
    let inc_workers: BTreeSet<String> = incumbent
        .worker_ids()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let inc_ps: BTreeSet<String> = incumbent.ps_ids().iter().map(|s| s.to_string()).collect();

    let mut patterns = vec![(inc_workers.clone(), inc_ps.clone())];
    for id in &ids {
        let mut workers = inc_workers.clone();
        if !workers.remove(id) {
            workers.insert(id.clone());
        }
        if !workers.is_empty() {
            patterns.push((workers, inc_ps.clone()));
        }
        let mut ps = inc_ps.clone();
        if !ps.remove(id) {
            ps.insert(id.clone());
        }
        if !ps.is_empty() {
            patterns.push((inc_workers.clone(), ps));
        }
    }

    let bernoulli_subset = |rng: &mut ChaCha8Rng| -> BTreeSet<String> {
        loop {
            let s: BTreeSet<String> = ids
                .iter()
                .filter(|_| rng.random::<bool>())
                .cloned()
                .collect();
            if !s.is_empty() {
                return s;
            }
        }
    };
    let sized_subset = |rng: &mut ChaCha8Rng| -> BTreeSet<String> {
        let size = rng.random_range(1..=ids.len());
        let mut pool = ids.clone();
        for i in 0..size {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(size);
        pool.into_iter().collect()
    };

    let mut toggle = false;
    while patterns.len() < count {
        let pattern = if toggle {
            (bernoulli_subset(rng), bernoulli_subset(rng))
        } else {
            (sized_subset(rng), sized_subset(rng))
        };
        toggle = !toggle;
        patterns.push(pattern);
    }
    patterns.truncate(count);
    patterns
}

/// Proposes the next configuration to evaluate: optimizes loads for every
/// candidate flag pattern, scores each result by expected improvement, and
/// returns the best not-yet-evaluated candidate. Ties break toward fewer
/// workers, then lexicographically. If every candidate has zero improvement
/// mass the best predicted mean wins instead.
#[allow(clippy::too_many_arguments)]
pub fn propose(
    model: &dyn IterationModel,
    evaluated: &[Configuration],
    incumbent: &Configuration,
    best: f64,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    params: &AcquisitionParams,
    stream_seed: u64,
) -> Configuration {
    let mut pattern_rng = rngutil::stream(&[stream_seed, 0xF1A6]);
    let patterns = flag_patterns(
        incumbent,
        cluster,
        params.candidate_subsets.max(1),
        &mut pattern_rng,
    );

    // Candidate streams derive from (stream_seed, candidate index): scoring
    // is order-independent, so this parallel fan-out equals serial execution.
    let mut scored: Vec<(usize, Configuration, f64, f64)> = patterns
        .into_par_iter()
        .enumerate()
        .map(|(i, (workers, ps))| {
            let config = optimize_loads(model, &workers, &ps, cluster, workload, params);
            let mut rng = rngutil::stream(&[stream_seed, i as u64]);
            let ei =
                expected_improvement(model, &config, cluster, workload, best, params, &mut rng);
            let mean = model.mean_time(&config, cluster, workload);
            (i, config, ei, mean)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then_with(|| a.1.worker_count().cmp(&b.1.worker_count()))
            .then_with(|| a.1.digest().cmp(&b.1.digest()))
    });

    let all_zero = scored.iter().all(|(_, _, ei, _)| *ei <= 0.0);
    if all_zero {
        log::info!("all candidates have zero expected improvement; falling back to best mean");
        scored.sort_by(|a, b| {
            a.3.partial_cmp(&b.3)
                .unwrap()
                .then_with(|| a.1.digest().cmp(&b.1.digest()))
        });
    }

    for (_, config, _, _) in &scored {
        if !evaluated.contains(config) {
            return config.clone();
        }
    }
    // Every candidate was already evaluated; try fresh random configurations
    // before conceding the space is exhausted.
    let mut rng = rngutil::stream(&[stream_seed, 0xFA11]);
    for _ in 0..1000 {
        let config = domain::sample_random(cluster, workload, &mut rng);
        if !evaluated.contains(&config) {
            return config;
        }
    }
    scored
        .into_iter()
        .next()
        .map(|(_, c, _, _)| c)
        .expect("at least one candidate")
}

fn seed_configs(
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    seed: u64,
) -> Result<Vec<Configuration>, OptError> {
    let mut seeds = vec![domain::uniform_devices(cluster, workload)?];
    if cluster.has_gpus() {
        seeds.push(domain::uniform_gpus(cluster, workload)?);
    } else {
        let mut rng = rngutil::stream(&[seed, 0x5EED]);
        seeds.push(domain::sample_random(cluster, workload, &mut rng));
    }
    Ok(seeds)
}

fn push_point(
    trajectory: &mut Vec<TrajectoryPoint>,
    config: Configuration,
    measurement: Measurement,
    started: Instant,
    model_digest: String,
) {
    let best_so_far = trajectory.last().map_or(measurement.objective, |p| {
        p.best_so_far.min(measurement.objective)
    });
    trajectory.push(TrajectoryPoint {
        iteration: trajectory.len(),
        config,
        measurement,
        best_so_far,
        wall_time_s: started.elapsed().as_secs_f64(),
        model_digest,
    });
}

/// Runs the bespoke optimizer: uniform seeds, then fit-propose-evaluate
/// until `budget` configurations have been measured.
pub fn run_bespoke(
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    budget: usize,
    seed: u64,
) -> Result<OptRun, OptError> {
    run_bespoke_with(
        cluster,
        workload,
        budget,
        seed,
        &AcquisitionParams::default(),
    )
}

pub fn run_bespoke_with(
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    budget: usize,
    seed: u64,
    params: &AcquisitionParams,
) -> Result<OptRun, OptError> {
    if budget < 3 {
        return Err(OptError::BudgetTooSmall(budget));
    }
    let mut trajectory = Vec::new();
    let mut history: Vec<(Configuration, Measurement)> = Vec::new();

    for config in seed_configs(cluster, workload, seed)? {
        let started = Instant::now();
        let m = simulator::run_experiment(
            &config,
            cluster,
            workload,
            mix_eval_seed(seed, trajectory.len()),
        )?;
        history.push((config.clone(), m.clone()));
        push_point(&mut trajectory, config, m, started, "seed".into());
        if trajectory.len() == budget {
            break;
        }
    }

    while trajectory.len() < budget {
        let started = Instant::now();
        let model = PerfModel::fit(&history, cluster, workload)?;
        let best = trajectory.last().expect("seeded").best_so_far;
        let incumbent = history
            .iter()
            .min_by(|a, b| a.1.objective.partial_cmp(&b.1.objective).unwrap())
            .map(|(c, _)| c.clone())
            .expect("seeded");
        let evaluated: Vec<Configuration> = history.iter().map(|(c, _)| c.clone()).collect();
        let config = propose(
            &model,
            &evaluated,
            &incumbent,
            best,
            cluster,
            workload,
            params,
            rngutil::derive_seed(&[seed, trajectory.len() as u64]),
        );
        let m = simulator::run_experiment(
            &config,
            cluster,
            workload,
            mix_eval_seed(seed, trajectory.len()),
        )?;
        history.push((config.clone(), m.clone()));
        push_point(&mut trajectory, config, m, started, model.digest());
    }

    Ok(OptRun {
        method: Method::Bespoke,
        seed,
        trajectory,
    })
}

fn mix_eval_seed(seed: u64, iteration: usize) -> u64 {
    rngutil::derive_seed(&[seed, 0xE7A1, iteration as u64])
}

/// Closed-form expected improvement of a Gaussian posterior.
fn normal_ei(mean: f64, var: f64, best: f64) -> f64 {
    let sd = var.max(0.0).sqrt();
    if sd < 1e-15 {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / sd;
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (best - mean) * std_normal.cdf(z) + sd * std_normal.pdf(z)
}

/// Runs the generic flat-GP baseline: one GP over the encoded configuration
/// vector, expected improvement maximized by scoring 4096 random decoded
/// candidates per iteration. Seeding and evaluation match `run_bespoke`.
pub fn run_generic(
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    budget: usize,
    seed: u64,
) -> Result<OptRun, OptError> {
    if budget < 3 {
        return Err(OptError::BudgetTooSmall(budget));
    }
    let dim = encode_dim(cluster);
    let mut trajectory = Vec::new();
    let mut history: Vec<(Configuration, Measurement)> = Vec::new();

    for config in seed_configs(cluster, workload, seed)? {
        let started = Instant::now();
        let m = simulator::run_experiment(
            &config,
            cluster,
            workload,
            mix_eval_seed(seed, trajectory.len()),
        )?;
        history.push((config.clone(), m.clone()));
        push_point(&mut trajectory, config, m, started, "seed".into());
        if trajectory.len() == budget {
            break;
        }
    }

    while trajectory.len() < budget {
        let started = Instant::now();
        let xs: Vec<Vec<f64>> = history.iter().map(|(c, _)| encode(c)).collect();
        let ys: Vec<f64> = history.iter().map(|(_, m)| m.objective).collect();
        let surrogate = gp::fit(&xs, &ys)?;
        let best = trajectory.last().expect("seeded").best_so_far;

        let mut rng = rngutil::stream(&[seed, 0x6E6E, trajectory.len() as u64]);
        let mut chosen: Option<(f64, Configuration)> = None;
        for _ in 0..4096 {
            let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let Ok(config) = domain::decode(&v, cluster, workload) else {
                continue;
            };
            if history.iter().any(|(c, _)| c == &config) {
                continue;
            }
            let (mean, var) = surrogate.predict(&encode(&config))?;
            let ei = normal_ei(mean, var, best);
            if chosen.as_ref().is_none_or(|(b, _)| ei > *b) {
                chosen = Some((ei, config));
            }
        }
        let config = match chosen {
            Some((_, c)) => c,
            None => domain::sample_random(cluster, workload, &mut rng),
        };
        let m = simulator::run_experiment(
            &config,
            cluster,
            workload,
            mix_eval_seed(seed, trajectory.len()),
        )?;
        history.push((config.clone(), m.clone()));
        let digest = format!("flat_gp n={}", xs.len());
        push_point(&mut trajectory, config, m, started, digest);
    }

    Ok(OptRun {
        method: Method::GenericGp,
        seed,
        trajectory,
    })
}

/// Runs a non-adaptive baseline: the uniform configurations evaluate once,
/// `random` evaluates `budget` independently sampled valid configurations.
pub fn run_baseline(
    method: Method,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    budget: usize,
    seed: u64,
) -> Result<OptRun, OptError> {
    let mut trajectory = Vec::new();
    match method {
        Method::UniformDevices | Method::UniformGpus => {
            let started = Instant::now();
            let config = if method == Method::UniformDevices {
                domain::uniform_devices(cluster, workload)?
            } else {
                domain::uniform_gpus(cluster, workload)?
            };
            let m = simulator::run_experiment(&config, cluster, workload, mix_eval_seed(seed, 0))?;
            push_point(&mut trajectory, config, m, started, String::new());
        }
        Method::Random => {
            let mut rng = rngutil::stream(&[seed, 0x7A4D]);
            for i in 0..budget.max(1) {
                let started = Instant::now();
                let config = domain::sample_random(cluster, workload, &mut rng);
                let m =
                    simulator::run_experiment(&config, cluster, workload, mix_eval_seed(seed, i))?;
                push_point(&mut trajectory, config, m, started, String::new());
            }
        }
        Method::Bespoke | Method::GenericGp => {
            return match method {
                Method::Bespoke => run_bespoke(cluster, workload, budget, seed),
                _ => run_generic(cluster, workload, budget, seed),
            };
        }
    }
    Ok(OptRun {
        method,
        seed,
        trajectory,
    })
}

/// Dispatches any method through one entry point.
pub fn run_method(
    method: Method,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    budget: usize,
    seed: u64,
) -> Result<OptRun, OptError> {
    match method {
        Method::Bespoke => run_bespoke(cluster, workload, budget, seed),
        Method::GenericGp => run_generic(cluster, workload, budget, seed),
        _ => run_baseline(method, cluster, workload, budget, seed),
    }
}
