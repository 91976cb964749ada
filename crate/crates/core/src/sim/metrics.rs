use serde::{Deserialize, Serialize};

use super::Schedule;
use crate::config::Scenario;

/// Outcome of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub scenario: Scenario,
    pub schedule: Schedule,
    pub requests: usize,
    pub completed: usize,
    /// Fractional under deterministic-mean acceptance.
    pub tokens_emitted: f64,
    pub sim_time: f64,
    pub throughput: f64,
    /// Throughput with the first and last 10% of simulated time excluded.
    pub warm_throughput: f64,
    /// Completion minus arrival, per completed request in id order.
    pub latencies: Vec<f64>,
    pub p50_latency: f64,
    pub p99_latency: f64,
    pub peak_hbm: u64,
    pub hbm_capacity: u64,
    /// Bytes by which the peak exceeded capacity (lock-step may).
    pub hbm_excess: u64,
    pub interconnect_busy_fraction: f64,
    pub iterations: u64,
    pub verify_counts: Vec<u32>,
    /// Interconnect seconds spent on reloads in each verify cycle
    /// (batch-synchronous schedules only).
    pub cycle_transfer_s: Vec<f64>,
    /// Seconds the GPU sat idle waiting for reloads.
    pub exposed_transfer_s: f64,
    pub late_transfers: u64,
    pub stalled_verifies: u64,
    /// Requests never served (full-KV baseline with no room for any).
    pub unserved: usize,
}

/// Nearest-rank percentile; 0 for an empty sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Accumulates per-iteration samples and per-request completions.
#[derive(Debug, Clone)]
pub(crate) struct Recorder {
    scenario: Scenario,
    schedule: Schedule,
    requests: usize,
    capacity: u64,
    /// `(end_time, tokens)` per tick.
    ticks: Vec<(f64, f64)>,
    latencies: Vec<(u64, f64)>,
    pub peak_hbm: u64,
    pub link_busy: f64,
    pub iterations: u64,
    pub verify_counts: Vec<u32>,
    pub cycle_transfer_s: Vec<f64>,
    pub exposed_transfer_s: f64,
    pub late_transfers: u64,
    pub stalled_verifies: u64,
    pub unserved: usize,
    pub end_time: f64,
}

impl Recorder {
    pub fn new(scenario: Scenario, schedule: Schedule, requests: usize, capacity: u64) -> Self {
        Self {
            scenario,
            schedule,
            requests,
            capacity,
            ticks: Vec::new(),
            latencies: Vec::new(),
            peak_hbm: 0,
            link_busy: 0.0,
            iterations: 0,
            verify_counts: Vec::new(),
            cycle_transfer_s: Vec::new(),
            exposed_transfer_s: 0.0,
            late_transfers: 0,
            stalled_verifies: 0,
            unserved: 0,
            end_time: 0.0,
        }
    }

    pub fn tokens(&mut self, at: f64, tokens: f64) {
        if tokens > 0.0 {
            self.ticks.push((at, tokens));
        }
        self.end_time = self.end_time.max(at);
    }

    pub fn hbm(&mut self, bytes: u64) {
        self.peak_hbm = self.peak_hbm.max(bytes);
    }

    pub fn done(&mut self, id: u64, latency: f64) {
        self.latencies.push((id, latency));
    }

    pub fn finish(mut self) -> SimMetrics {
        let sim_time = self.end_time;
        let tokens: f64 = self.ticks.iter().map(|t| t.1).sum();
        let throughput = if sim_time > 0.0 { tokens / sim_time } else { 0.0 };
        let (lo, hi) = (0.1 * sim_time, 0.9 * sim_time);
        let warm: f64 = self
            .ticks
            .iter()
            .filter(|(t, _)| *t > lo && *t <= hi)
            .map(|t| t.1)
            .sum();
        let warm_throughput = if hi > lo { warm / (hi - lo) } else { 0.0 };
        self.latencies.sort_by_key(|l| l.0);
        let latencies: Vec<f64> = self.latencies.iter().map(|l| l.1).collect();
        SimMetrics {
            scenario: self.scenario,
            schedule: self.schedule,
            requests: self.requests,
            completed: latencies.len(),
            tokens_emitted: tokens,
            sim_time,
            throughput,
            warm_throughput,
            p50_latency: percentile(&latencies, 50.0),
            p99_latency: percentile(&latencies, 99.0),
            latencies,
            peak_hbm: self.peak_hbm,
            hbm_capacity: self.capacity,
            hbm_excess: self.peak_hbm.saturating_sub(self.capacity),
            interconnect_busy_fraction: if sim_time > 0.0 {
                (self.link_busy / sim_time).min(1.0)
            } else {
                0.0
            },
            iterations: self.iterations,
            verify_counts: self.verify_counts,
            cycle_transfer_s: self.cycle_transfer_s,
            exposed_transfer_s: self.exposed_transfer_s,
            late_transfers: self.late_transfers,
            stalled_verifies: self.stalled_verifies,
            unserved: self.unserved,
        }
    }
}
