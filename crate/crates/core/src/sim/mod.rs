//! Iteration-quantized simulators for both deployment pipelines and the
//! lock-step, sequential-verify and full-KV baselines.
//!
//! Every run is single-threaded and deterministic in `(config, workload,
//! seed)`.

mod acceptance;
mod link;
mod lockstep;
mod long_context;
mod metrics;
mod remote_prefix;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Request, Scenario, SystemConfig};

pub use acceptance::AcceptanceSampler;
pub use link::EdfLink;
pub use long_context::{baseline_batch_cap, derived_iteration_time};
pub use metrics::{percentile, SimMetrics};
pub use remote_prefix::{SimEvent, SimEventKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("schedule {schedule} is not defined for scenario {scenario}")]
    UnsupportedSchedule {
        schedule: &'static str,
        scenario: &'static str,
    },
    #[error("request {0} can never be admitted: it does not fit in HBM or the lookahead window")]
    Unadmittable(u64),
    #[error("simulation exceeded {0} iterations")]
    IterationLimit(u64),
    #[error("scheduler: {0}")]
    Scheduler(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Staggered,
    Lockstep,
    SequentialVerify,
    FullKvBaseline,
}

impl Schedule {
    pub const ALL: [Schedule; 4] = [
        Schedule::Staggered,
        Schedule::Lockstep,
        Schedule::SequentialVerify,
        Schedule::FullKvBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Staggered => "staggered",
            Schedule::Lockstep => "lockstep",
            Schedule::SequentialVerify => "sequential-verify",
            Schedule::FullKvBaseline => "full-kv-baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Schedule> {
        Schedule::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Knobs that do not belong in the system configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub seed: u64,
    /// Assert ring constraints and reservation mass after every step.
    pub check_invariants: bool,
    pub max_iterations: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            check_invariants: cfg!(debug_assertions),
            max_iterations: 50_000_000,
        }
    }
}

impl SimOptions {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// Runs `workload` under `schedule` for the configured scenario.
pub fn simulate(
    cfg: &SystemConfig,
    workload: &[Request],
    schedule: Schedule,
    opts: SimOptions,
) -> Result<SimMetrics, SimError> {
    cfg.validate()?;
    for r in workload {
        r.validate()?;
    }
    match (cfg.scenario(), schedule) {
        (Scenario::LongContext, Schedule::Staggered) => long_context::staggered(cfg, workload, opts),
        (Scenario::LongContext, Schedule::Lockstep) => lockstep::run(cfg, workload, opts, false),
        (Scenario::LongContext, Schedule::SequentialVerify) => lockstep::run(cfg, workload, opts, true),
        (Scenario::LongContext, Schedule::FullKvBaseline) => long_context::full_kv_baseline(cfg, workload, opts),
        (Scenario::RemotePrefix, Schedule::Staggered) => {
            if cfg.hardware.local_gpus == 0 || cfg.hardware.remote_gpus == 0 {
                return Err(SimError::Config(ConfigError::Invalid(
                    "the speculative remote-prefix pipeline needs local_gpus >= 1 and remote_gpus >= 1".into(),
                )));
            }
            remote_prefix::speculative(cfg, workload, opts)
        }
        (Scenario::RemotePrefix, Schedule::FullKvBaseline) => {
            if cfg.hardware.local_gpus == 0 {
                return Err(SimError::Config(ConfigError::Invalid(
                    "the remote-prefix baseline needs local_gpus >= 1".into(),
                )));
            }
            remote_prefix::full_kv_baseline(cfg, workload, opts)
        }
        (scenario, schedule) => Err(SimError::UnsupportedSchedule {
            schedule: schedule.name(),
            scenario: scenario.name(),
        }),
    }
}

pub fn simulate_long_context(cfg: &SystemConfig, workload: &[Request], opts: SimOptions) -> Result<SimMetrics, SimError> {
    require(cfg, Scenario::LongContext)?;
    simulate(cfg, workload, Schedule::Staggered, opts)
}

pub fn simulate_remote_prefix(cfg: &SystemConfig, workload: &[Request], opts: SimOptions) -> Result<SimMetrics, SimError> {
    require(cfg, Scenario::RemotePrefix)?;
    simulate(cfg, workload, Schedule::Staggered, opts)
}

pub fn simulate_baseline_full_kv(cfg: &SystemConfig, workload: &[Request], opts: SimOptions) -> Result<SimMetrics, SimError> {
    simulate(cfg, workload, Schedule::FullKvBaseline, opts)
}

/// One metrics row per long-context schedule, same workload and seed.
pub fn compare_schedules(
    cfg: &SystemConfig,
    workload: &[Request],
    opts: SimOptions,
) -> Result<Vec<SimMetrics>, SimError> {
    require(cfg, Scenario::LongContext)?;
    Schedule::ALL
        .into_iter()
        .map(|s| simulate(cfg, workload, s, opts))
        .collect()
}

fn require(cfg: &SystemConfig, scenario: Scenario) -> Result<(), SimError> {
    if cfg.scenario() == scenario {
        Ok(())
    } else {
        Err(SimError::Config(ConfigError::Invalid(format!(
            "config scenario is {}, expected {}",
            cfg.scenario().name(),
            scenario.name()
        ))))
    }
}

/// Workload sorted by arrival, ties by id.
fn arrival_order(workload: &[Request]) -> Vec<Request> {
    let mut v = workload.to_vec();
    v.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
    v
}

/// Tokens still owed to a request; sub-1e-9 remainders count as done.
fn remaining(k: u32, emitted: f64) -> f64 {
    let r = k as f64 - emitted;
    if r < 1e-9 {
        0.0
    } else {
        r
    }
}
