//! Schedule tuner for distributed synchronous SGD on heterogeneous clusters.
//!
//! Given a cluster of machines with mixed CPU/GPU capability, a training
//! workload, and a batch size, the tuner searches for the schedule (which
//! machines act as workers, which as parameter servers, and how many inputs
//! each device processes per iteration) that minimizes the average SGD
//! iteration time. The search is Bayesian optimization driven by a structured
//! performance model: per-device-type processing-rate GPs, per-machine-type
//! aggregation GPs, and a semi-parametric communication model whose
//! connection speeds are inferred with a particle filter.
//!
//! A built-in cluster simulator stands in for real hardware so that runs are
//! reproducible and cheap. The `sgdtune` binary exposes `optimize`, `compare`
//! and `sweep` subcommands over the same machinery.

pub mod cli;
pub mod domain;
pub mod fixtures;
pub mod gp;
pub mod inference;
pub mod optimizer;
pub mod perf_model;
pub mod report;
pub mod runlog;
pub mod simulator;

mod rngutil;

pub use domain::{ClusterSpec, Configuration, DeviceKind, DeviceRef, DeviceType, WorkloadSpec};
pub use optimizer::{Method, OptRun};
pub use simulator::{Measurement, SimParams};
