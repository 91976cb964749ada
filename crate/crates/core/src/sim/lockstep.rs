//! Batch-synchronous comparison schedules: every request drafts `x`
//! iterations together, then reloads and verifies.
//!
//! * lock-step: all reloads run back to back while the GPU idles, then one
//!   iteration verifies the whole batch against full KV.
//! * sequential-verify: one reload followed by one single-request verify at a
//!   time, so only one full KV is ever in HBM.
//!
//! Requests join at cycle boundaries with no capacity check; any HBM excess is
//! reported in the metrics.

use std::collections::BTreeMap;

use super::acceptance::AcceptanceSampler;
use super::long_context::overhead;
use super::metrics::Recorder;
use super::{arrival_order, remaining, Schedule, SimError, SimMetrics, SimOptions};
use crate::config::{IterationTimeMode, Request, SystemConfig};

struct Live {
    req: Request,
    emitted: f64,
}

pub(super) fn run(
    cfg: &SystemConfig,
    workload: &[Request],
    opts: SimOptions,
    sequential: bool,
) -> Result<SimMetrics, SimError> {
    let hw = &cfg.hardware;
    let bw_inter = hw.interconnect()?;
    let bw_hbm = hw.hbm_bandwidth;
    let m = cfg.model.weights_bytes;
    let x = cfg.draft_length();
    let fixed = match cfg.runtime.iteration_time_mode {
        IterationTimeMode::Fixed => cfg.runtime.fixed_iteration_time_s,
        IterationTimeMode::Derived => None,
    };
    let extra = overhead(cfg);
    let iter_time = |read: u64| fixed.unwrap_or(read as f64 / bw_hbm) + extra;

    let schedule = if sequential {
        Schedule::SequentialVerify
    } else {
        Schedule::Lockstep
    };
    let arrivals = arrival_order(workload);
    let n = arrivals.len();
    let mut rec = Recorder::new(cfg.scenario(), schedule, n, hw.gpu_mem);
    let mut sampler = AcceptanceSampler::new(cfg.acceptance.clone(), cfg.runtime.acceptance_draws, opts.seed);
    let mut batch: BTreeMap<u64, Live> = BTreeMap::new();
    let mut now = 0.0;
    let mut next = 0;

    loop {
        while next < n && arrivals[next].arrival <= now {
            let r = arrivals[next].clone();
            next += 1;
            batch.insert(r.id, Live { req: r, emitted: 0.0 });
        }
        if batch.is_empty() {
            if next == n {
                break;
            }
            now = arrivals[next].arrival;
            continue;
        }
        if rec.iterations >= opts.max_iterations {
            return Err(SimError::IterationLimit(opts.max_iterations));
        }

        let spec: Vec<u64> = batch.values().filter(|l| l.req.speculating).map(|l| l.req.id).collect();
        let sum_comp: u64 = spec.iter().map(|id| batch[id].req.compressed_bytes()).sum();
        let sum_full: u64 = spec.iter().map(|id| batch[id].req.kv_full_bytes).sum();
        let mut nonspec_full: u64 = batch
            .values()
            .filter(|l| !l.req.speculating)
            .map(|l| l.req.kv_full_bytes)
            .sum();

        // Non-speculating requests decode one token in every iteration.
        let decode_tick = |batch: &mut BTreeMap<u64, Live>, rec: &mut Recorder, at: f64, nonspec_full: &mut u64| {
            let mut tokens = 0.0;
            let mut done = Vec::new();
            for l in batch.values_mut().filter(|l| !l.req.speculating) {
                let t = remaining(l.req.output_tokens, l.emitted).min(1.0);
                l.emitted += t;
                tokens += t;
                if remaining(l.req.output_tokens, l.emitted) == 0.0 {
                    done.push(l.req.id);
                }
            }
            for id in done {
                let l = batch.remove(&id).expect("live");
                *nonspec_full -= l.req.kv_full_bytes;
                rec.done(id, at - l.req.arrival);
            }
            tokens
        };

        let draft_iters = if spec.is_empty() { 1 } else { x };
        for _ in 0..draft_iters {
            rec.hbm(m + sum_comp + nonspec_full);
            now += iter_time(m + sum_comp + nonspec_full);
            rec.iterations += 1;
            rec.verify_counts.push(0);
            let t = decode_tick(&mut batch, &mut rec, now, &mut nonspec_full);
            rec.tokens(now, t);
        }
        if spec.is_empty() {
            continue;
        }

        let mut cycle_xfer = 0.0;
        let mut verify = |id: u64, at: f64, batch: &mut BTreeMap<u64, Live>, rec: &mut Recorder| -> Result<f64, SimError> {
            let l = batch.get_mut(&id).expect("speculating request");
            let owed = remaining(l.req.output_tokens, l.emitted);
            let t = sampler.round_tokens(x, l.req.compression_ratio, owed)?;
            l.emitted += t;
            if remaining(l.req.output_tokens, l.emitted) == 0.0 {
                let l = batch.remove(&id).expect("live");
                rec.done(id, at - l.req.arrival);
            }
            Ok(t)
        };

        if sequential {
            for &id in &spec {
                let kv = batch[&id].req.kv_full_bytes;
                let xfer = kv as f64 / bw_inter;
                now += xfer;
                cycle_xfer += xfer;
                rec.hbm(m + sum_comp + kv + nonspec_full);
                now += iter_time(m + kv + nonspec_full);
                rec.iterations += 1;
                rec.verify_counts.push(1);
                let mut t = verify(id, now, &mut batch, &mut rec)?;
                t += decode_tick(&mut batch, &mut rec, now, &mut nonspec_full);
                rec.tokens(now, t);
            }
        } else {
            let xfer = sum_full as f64 / bw_inter;
            now += xfer;
            cycle_xfer += xfer;
            // compressed copies are offloaded while the full batch is resident
            rec.hbm(m + sum_full + nonspec_full);
            now += iter_time(m + sum_full + nonspec_full);
            rec.iterations += 1;
            rec.verify_counts.push(spec.len() as u32);
            let mut t = 0.0;
            for &id in &spec {
                t += verify(id, now, &mut batch, &mut rec)?;
            }
            t += decode_tick(&mut batch, &mut rec, now, &mut nonspec_full);
            rec.tokens(now, t);
        }
        rec.cycle_transfer_s.push(cycle_xfer);
        rec.exposed_transfer_s += cycle_xfer;
        rec.link_busy += cycle_xfer;
    }
    Ok(rec.finish())
}
