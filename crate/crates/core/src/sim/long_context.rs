//! Long-context decoding on one GPU: drafting and verification share the
//! GPU, full-KV reloads arrive over the CPU–GPU interconnect.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::acceptance::AcceptanceSampler;
use super::link::EdfLink;
use super::metrics::Recorder;
use super::{arrival_order, remaining, Schedule, SimError, SimMetrics, SimOptions};
use crate::config::{ConfigError, IterationTimeMode, Request, SystemConfig};
use crate::scheduler::{ReserveRings, RoundOutcome, Scheduler, SpecSession, StepHooks};

/// Requests the full-KV baseline can hold: `⌊(GPU_mem − M) / KV_full⌋`.
pub fn baseline_batch_cap(gpu_mem: u64, weights: u64, kv_full: u64) -> u64 {
    gpu_mem.saturating_sub(weights) / kv_full.max(1)
}

/// Staggered iteration time for the current request set:
/// `max((M + Σ kv·(c + 1/x) + Σ kv_nonspec) / BW_hbm, Σ kv / (x·BW_inter))`.
pub fn derived_iteration_time<'a>(
    weights: u64,
    requests: impl Iterator<Item = &'a Request>,
    x: u32,
    bw_hbm: f64,
    bw_inter: f64,
) -> f64 {
    let x = x as f64;
    let mut read = weights as f64;
    let mut xfer = 0.0;
    for r in requests {
        let kv = r.kv_full_bytes as f64;
        if r.speculating {
            read += kv * (r.compression_ratio + 1.0 / x);
            xfer += kv / (x * bw_inter);
        } else {
            read += kv;
        }
    }
    (read / bw_hbm).max(xfer)
}

fn fixed_time(cfg: &SystemConfig) -> Option<f64> {
    match cfg.runtime.iteration_time_mode {
        IterationTimeMode::Fixed => cfg.runtime.fixed_iteration_time_s,
        IterationTimeMode::Derived => None,
    }
}

pub(super) fn overhead(cfg: &SystemConfig) -> f64 {
    cfg.compressor.as_ref().map_or(0.0, |c| c.iteration_overhead())
}

struct Hooks<'a> {
    ready: &'a BTreeSet<u64>,
    sampler: &'a mut AcceptanceSampler,
    tokens: f64,
    error: Option<ConfigError>,
}

impl StepHooks for Hooks<'_> {
    fn transfer_ready(&self, id: u64) -> bool {
        self.ready.contains(&id)
    }

    fn on_verify(&mut self, s: &SpecSession, drafted: u32) -> RoundOutcome {
        let owed = remaining(s.request.output_tokens, s.tokens_emitted);
        let tokens = match self.sampler.round_tokens(drafted, s.request.compression_ratio, owed) {
            Ok(t) => t,
            Err(e) => {
                self.error.get_or_insert(e);
                owed
            }
        };
        self.tokens += tokens;
        RoundOutcome {
            tokens,
            finished: remaining(s.request.output_tokens, s.tokens_emitted + tokens) == 0.0,
        }
    }

    fn on_decode(&mut self, s: &SpecSession) -> RoundOutcome {
        let owed = remaining(s.request.output_tokens, s.tokens_emitted);
        let tokens = owed.min(1.0);
        self.tokens += tokens;
        RoundOutcome {
            tokens,
            finished: remaining(s.request.output_tokens, s.tokens_emitted + tokens) == 0.0,
        }
    }
}

/// Cross-resource staggered schedule driven by the lookahead scheduler.
///
/// Each iteration reads the weights, the compressed KV of drafting requests,
/// the full KV of verifying and non-speculating requests. Its duration is the
/// HBM read time, but never shorter than the link time promised to window 0,
/// so reserved reloads always land by their verify iteration. In fixed mode
/// the duration is the configured constant.
pub(super) fn staggered(cfg: &SystemConfig, workload: &[Request], opts: SimOptions) -> Result<SimMetrics, SimError> {
    let hw = &cfg.hardware;
    let bw_inter = hw.interconnect()?;
    let bw_hbm = hw.hbm_bandwidth;
    let m = cfg.model.weights_bytes;
    let x = cfg.draft_length();
    let fixed = fixed_time(cfg);
    let extra = overhead(cfg);
    let arrivals = arrival_order(workload);
    let n = arrivals.len();

    let t0 = fixed.unwrap_or(m as f64 / bw_hbm);
    let rings = ReserveRings::new(cfg.lookahead_window() as usize, t0, bw_inter, hw.gpu_mem, m);
    let mut sched = Scheduler::new(rings, x).with_invariant_checks(false);
    let mut link = EdfLink::new(bw_inter);
    let mut sampler = AcceptanceSampler::new(cfg.acceptance.clone(), cfg.runtime.acceptance_draws, opts.seed);
    let mut rec = Recorder::new(cfg.scenario(), Schedule::Staggered, n, hw.gpu_mem);
    let mut inflight: BTreeMap<u64, u64> = BTreeMap::new();
    let mut now = 0.0;
    let mut next = 0;

    loop {
        while next < n && arrivals[next].arrival <= now {
            sched.enqueue(arrivals[next].clone());
            next += 1;
        }
        if sched.is_idle() {
            if next == n {
                break;
            }
            now = arrivals[next].arrival;
            continue;
        }
        if rec.iterations >= opts.max_iterations {
            return Err(SimError::IterationLimit(opts.max_iterations));
        }

        let t_ring = fixed.unwrap_or_else(|| {
            let resident = sched.sessions().filter(|s| s.resident_bytes > 0);
            derived_iteration_time(m, resident.map(|s| &s.request), x, bw_hbm, bw_inter)
        });
        sched.rings.set_iteration_time(t_ring);
        sched.admit_waiting();
        let plan = sched.plan();

        let nothing_runs = plan.drafting.is_empty() && plan.due_verifies.is_empty() && plan.decoding.is_empty();
        if nothing_runs && sched.rings.kv_resident() == 0 && sched.rings.live().next().is_none() {
            // nobody fits even on an empty GPU
            if next == n {
                let id = sched.sessions().next().map_or(0, |s| s.id());
                return Err(SimError::Unadmittable(id));
            }
            now = now.max(arrivals[next].arrival);
            continue;
        }

        for rs in &plan.reload_starts {
            link.add(rs.request_id, rs.bytes, rs.deadline_iteration);
            inflight.insert(rs.request_id, rs.bytes);
        }
        let req = |id: &u64| &sched.session(*id).expect("planned session").request;
        let base_read = m
            + plan.drafting.iter().map(|id| req(id).compressed_bytes()).sum::<u64>()
            + plan.decoding.iter().map(|id| req(id).kv_full_bytes).sum::<u64>();
        let committed = sched.rings.committed_link_seconds(0);
        let duration = |ready: &BTreeSet<u64>| -> f64 {
            let t = match fixed {
                Some(t) => t,
                None => {
                    let read = base_read + ready.iter().map(|id| req(id).kv_full_bytes).sum::<u64>();
                    (read as f64 / bw_hbm).max(committed)
                }
            };
            t + extra
        };

        // Verifies whose transfer lands within the iteration; shrinking the
        // set only shortens the iteration, so this converges.
        let mut ready: BTreeSet<u64> = plan.due_verifies.iter().copied().collect();
        loop {
            let (done, _) = link.preview(duration(&ready));
            let next_ready: BTreeSet<u64> = ready
                .iter()
                .copied()
                .filter(|id| !link.pending(*id) || done.contains(id))
                .collect();
            if next_ready == ready {
                break;
            }
            ready = next_ready;
        }
        let d = duration(&ready);

        rec.hbm(m + sched.rings.kv_resident() + inflight.values().sum::<u64>());

        let mut hooks = Hooks {
            ready: &ready,
            sampler: &mut sampler,
            tokens: 0.0,
            error: None,
        };
        let arrival_of: BTreeMap<u64, f64> = plan
            .due_verifies
            .iter()
            .chain(&plan.decoding)
            .map(|id| (*id, req(id).arrival))
            .collect();
        let report = sched.execution_step(&mut hooks);
        if let Some(e) = hooks.error {
            return Err(e.into());
        }
        let tokens = hooks.tokens;

        let (_, busy) = link.run(d);
        rec.link_busy += busy;
        now += d;
        rec.iterations += 1;
        rec.tokens(now, tokens);
        rec.verify_counts.push(report.verifies.len() as u32);
        rec.stalled_verifies += report.stalled.len() as u64;
        rec.late_transfers += report.late.len() as u64;
        for id in &report.verifies {
            inflight.remove(id);
        }
        for id in &report.finished {
            link.cancel(*id);
            inflight.remove(id);
            rec.done(*id, now - arrival_of[id]);
        }
        if opts.check_invariants {
            sched
                .rings
                .check_invariants()
                .map_err(|e| SimError::Scheduler(e.to_string()))?;
        }
    }

    if sched.rings.kv_resident() != 0
        || sched.rings.live().next().is_some()
        || (0..sched.rings.window()).any(|i| sched.rings.bw_units(i) != 0 || sched.rings.hbm_inflight(i) != 0)
    {
        return Err(SimError::Scheduler("reservation mass leaked after drain".into()));
    }
    Ok(rec.finish())
}

/// No speculation: requests decode on full KV, admitted FIFO while
/// `M + Σ KV_full ≤ GPU_mem`. Requests that cannot fit on an empty GPU are
/// reported as unserved.
pub(super) fn full_kv_baseline(
    cfg: &SystemConfig,
    workload: &[Request],
    opts: SimOptions,
) -> Result<SimMetrics, SimError> {
    let hw = &cfg.hardware;
    let m = cfg.model.weights_bytes;
    let fixed = fixed_time(cfg);
    let arrivals = arrival_order(workload);
    let n = arrivals.len();
    let mut rec = Recorder::new(cfg.scenario(), Schedule::FullKvBaseline, n, hw.gpu_mem);
    let mut queue: VecDeque<Request> = VecDeque::new();
    let mut active: BTreeMap<u64, (Request, f64)> = BTreeMap::new();
    let mut used = m;
    let mut now = 0.0;
    let mut next = 0;

    loop {
        while next < n && arrivals[next].arrival <= now {
            let r = arrivals[next].clone();
            next += 1;
            if m + r.kv_full_bytes > hw.gpu_mem {
                rec.unserved += 1;
            } else {
                queue.push_back(r);
            }
        }
        while let Some(r) = queue.front() {
            if used + r.kv_full_bytes > hw.gpu_mem {
                break;
            }
            let r = queue.pop_front().expect("front exists");
            used += r.kv_full_bytes;
            active.insert(r.id, (r, 0.0));
        }
        if active.is_empty() {
            if next == n {
                break;
            }
            now = arrivals[next].arrival;
            continue;
        }
        if rec.iterations >= opts.max_iterations {
            return Err(SimError::IterationLimit(opts.max_iterations));
        }
        rec.hbm(used);
        let d = fixed.unwrap_or(used as f64 / hw.hbm_bandwidth);
        now += d;
        rec.iterations += 1;
        rec.verify_counts.push(0);
        let mut tokens = 0.0;
        let mut finished = Vec::new();
        for (id, (r, emitted)) in active.iter_mut() {
            let t = remaining(r.output_tokens, *emitted).min(1.0);
            *emitted += t;
            tokens += t;
            if remaining(r.output_tokens, *emitted) == 0.0 {
                finished.push(*id);
            }
        }
        rec.tokens(now, tokens);
        for id in finished {
            let (r, _) = active.remove(&id).expect("active");
            used -= r.kv_full_bytes;
            rec.done(id, now - r.arrival);
        }
    }
    Ok(rec.finish())
}
