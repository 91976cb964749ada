//! Remote prefix caching: remote GPUs draft on compressed KV fetched over the
//! slow storage link while local GPUs fetch full KV over the fast link and
//! verify. Event-driven in continuous time.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::Serialize;

use super::acceptance::AcceptanceSampler;
use super::metrics::Recorder;
use super::{arrival_order, remaining, Schedule, SimError, SimMetrics, SimOptions};
use crate::config::{AcceptanceDraws, ConfigError, Request, SystemConfig};

/// Event kinds in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimEventKind {
    RequestArrival,
    TransferComplete,
    IterationTick,
    VerifyComplete,
    RequestDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventPayload {
    None,
    /// Compressed KV reached the drafting GPU.
    CompressedKv,
    /// Full KV reached local GPU `n`.
    FullKv(usize),
    /// A draft round finished.
    DraftRound,
    /// One non-speculative decode step finished.
    DecodeStep,
}

/// Processed in nondecreasing time; ties by `(kind, request)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: SimEventKind,
    pub request: u64,
    pub payload: EventPayload,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.cmp(&other.kind))
            .then(self.request.cmp(&other.request))
            .then(self.payload.cmp(&other.payload))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
struct Queue(BinaryHeap<Reverse<SimEvent>>);

impl Queue {
    fn push(&mut self, time: f64, kind: SimEventKind, request: u64, payload: EventPayload) {
        self.0.push(Reverse(SimEvent { time, kind, request, payload }));
    }

    fn pop(&mut self) -> Option<SimEvent> {
        self.0.pop().map(|r| r.0)
    }
}

#[derive(Debug, Clone, Default)]
struct Gpu {
    /// Weights plus resident KV.
    mem: u64,
    active: usize,
    busy_until: f64,
    link_free: f64,
}

#[derive(Debug)]
struct State {
    req: Request,
    emitted: f64,
    remote: Option<usize>,
    local: Option<usize>,
    drafted: bool,
    loaded: bool,
}

struct Pools {
    remote: Vec<Gpu>,
    local: Vec<Gpu>,
    cap: u64,
    link_busy: f64,
}

impl Pools {
    fn peak(&self) -> u64 {
        self.remote.iter().chain(&self.local).map(|g| g.mem).max().unwrap_or(0)
    }

    fn fits(&self, gpu: &Gpu, kv: u64) -> bool {
        gpu.mem + kv <= self.cap
    }

    /// Least-occupied GPU with room, ties to the lower index.
    fn pick_remote(&self, kv: u64) -> Option<usize> {
        (0..self.remote.len())
            .filter(|&g| self.fits(&self.remote[g], kv))
            .min_by_key(|&g| (self.remote[g].active, g))
    }

    /// Earliest-available local GPU with room for `kv`.
    fn pick_local(&self, kv: u64) -> Option<usize> {
        (0..self.local.len())
            .filter(|&g| self.fits(&self.local[g], kv))
            .min_by(|&a, &b| {
                let ka = self.local[a].busy_until.max(self.local[a].link_free);
                let kb = self.local[b].busy_until.max(self.local[b].link_free);
                ka.total_cmp(&kb).then(a.cmp(&b))
            })
    }
}

struct Params {
    m: u64,
    x: u32,
    bw_hbm: f64,
    bw_local: f64,
    bw_remote: f64,
    cached: bool,
    verify_forward: Option<f64>,
    mean_mode: bool,
}

fn pools(cfg: &SystemConfig) -> Pools {
    let m = cfg.model.weights_bytes;
    let gpu = Gpu { mem: m, ..Gpu::default() };
    Pools {
        remote: vec![gpu.clone(); cfg.hardware.remote_gpus as usize],
        local: vec![gpu; cfg.hardware.local_gpus as usize],
        cap: cfg.hardware.gpu_mem,
        link_busy: 0.0,
    }
}

/// Speculative pipeline. Per request: fetch `c·KV` to a remote GPU, then
/// repeat rounds of `x` draft steps on the remote GPU overlapped with a full-KV
/// fetch to a local GPU, followed by a serial verify forward pass. With
/// `cached_verify` the local copy is fetched once and kept until completion;
/// otherwise it is re-fetched every round and evicted after the verify.
///
/// A draft step costs `(M + Σ resident compressed KV) / BW_hbm` on the drafting GPU,
/// the per-request token time at its current occupancy times the occupancy.
/// Deterministic-mean acceptance credits `γ·x` tokens per round, so a request
/// runs `⌈K / (x·γ)⌉` rounds; sampled acceptance credits accepted + 1.
pub(super) fn speculative(cfg: &SystemConfig, workload: &[Request], opts: SimOptions) -> Result<SimMetrics, SimError> {
    let hw = &cfg.hardware;
    let p = Params {
        m: cfg.model.weights_bytes,
        x: cfg.draft_length(),
        bw_hbm: hw.hbm_bandwidth,
        bw_local: hw.storage_local()?,
        bw_remote: hw.storage_remote()?,
        cached: cfg.scenario.cached_verify,
        verify_forward: cfg.scenario.verify_forward_s,
        mean_mode: cfg.runtime.acceptance_draws == AcceptanceDraws::DeterministicMean,
    };
    let arrivals = arrival_order(workload);
    let mut pools = pools(cfg);
    for r in &arrivals {
        if p.m + r.kv_full_bytes > pools.cap {
            return Err(SimError::Unadmittable(r.id));
        }
    }
    let mut rec = Recorder::new(cfg.scenario(), Schedule::Staggered, arrivals.len(), pools.cap);
    let mut sampler = AcceptanceSampler::new(cfg.acceptance.clone(), cfg.runtime.acceptance_draws, opts.seed);
    let mut q = Queue::default();
    let mut states: BTreeMap<u64, State> = BTreeMap::new();
    let mut remote_wait: VecDeque<u64> = VecDeque::new();
    let mut local_wait: VecDeque<u64> = VecDeque::new();
    for r in &arrivals {
        q.push(r.arrival, SimEventKind::RequestArrival, r.id, EventPayload::None);
        states.insert(
            r.id,
            State {
                req: r.clone(),
                emitted: 0.0,
                remote: None,
                local: None,
                drafted: false,
                loaded: false,
            },
        );
    }

    let mut events = 0u64;
    while let Some(ev) = q.pop() {
        events += 1;
        if events > opts.max_iterations {
            return Err(SimError::IterationLimit(opts.max_iterations));
        }
        let now = ev.time;
        let id = ev.request;
        match ev.kind {
            SimEventKind::RequestArrival => {
                remote_wait.push_back(id);
                admit_remote(&mut remote_wait, &mut states, &mut pools, &mut q, &p, now);
            }
            SimEventKind::TransferComplete => match ev.payload {
                EventPayload::CompressedKv => {
                    start_round(id, &mut states, &mut pools, &mut q, &mut local_wait, &p, now);
                }
                EventPayload::FullKv(_) => {
                    states.get_mut(&id).expect("state").loaded = true;
                    maybe_verify(id, &mut states, &mut pools, &mut q, &p, now);
                }
                _ => unreachable!("transfer payload"),
            },
            SimEventKind::IterationTick => {
                states.get_mut(&id).expect("state").drafted = true;
                maybe_verify(id, &mut states, &mut pools, &mut q, &p, now);
            }
            SimEventKind::VerifyComplete => {
                let s = states.get_mut(&id).expect("state");
                let owed = remaining(s.req.output_tokens, s.emitted);
                let tokens = if p.mean_mode {
                    (sampler.accepted(p.x, s.req.compression_ratio)?).min(owed)
                } else {
                    sampler.round_tokens(p.x, s.req.compression_ratio, owed)?
                };
                if tokens <= 0.0 && owed > 0.0 {
                    return Err(ConfigError::Invalid(format!(
                        "request {id}: acceptance rate 0 never completes under deterministic-mean rounds"
                    ))
                    .into());
                }
                s.emitted += tokens;
                rec.tokens(now, tokens);
                s.drafted = false;
                s.loaded = false;
                let done = remaining(s.req.output_tokens, s.emitted) == 0.0;
                if !p.cached {
                    let l = s.local.take().expect("verified on a local GPU");
                    pools.local[l].mem -= s.req.kv_full_bytes;
                    retry_local(&mut local_wait, &mut states, &mut pools, &mut q, &p, now);
                }
                if done {
                    q.push(now, SimEventKind::RequestDone, id, EventPayload::None);
                } else {
                    start_round(id, &mut states, &mut pools, &mut q, &mut local_wait, &p, now);
                }
            }
            SimEventKind::RequestDone => {
                let s = states.get_mut(&id).expect("state");
                rec.done(id, now - s.req.arrival);
                let g = s.remote.take().expect("drafting GPU");
                pools.remote[g].mem -= s.req.compressed_bytes();
                pools.remote[g].active -= 1;
                if let Some(l) = s.local.take() {
                    pools.local[l].mem -= s.req.kv_full_bytes;
                }
                admit_remote(&mut remote_wait, &mut states, &mut pools, &mut q, &p, now);
                retry_local(&mut local_wait, &mut states, &mut pools, &mut q, &p, now);
            }
        }
        rec.hbm(pools.peak());
    }
    rec.link_busy = pools.link_busy / (pools.remote.len() + pools.local.len()) as f64;
    Ok(rec.finish())
}

fn admit_remote(
    wait: &mut VecDeque<u64>,
    states: &mut BTreeMap<u64, State>,
    pools: &mut Pools,
    q: &mut Queue,
    p: &Params,
    now: f64,
) {
    while let Some(&id) = wait.front() {
        let s = states.get_mut(&id).expect("state");
        let kv = s.req.compressed_bytes();
        let Some(g) = pools.pick_remote(kv) else { break };
        wait.pop_front();
        let gpu = &mut pools.remote[g];
        gpu.mem += kv;
        gpu.active += 1;
        s.remote = Some(g);
        let start = now.max(gpu.link_free);
        let dt = kv as f64 / p.bw_remote;
        gpu.link_free = start + dt;
        pools.link_busy += dt;
        q.push(start + dt, SimEventKind::TransferComplete, id, EventPayload::CompressedKv);
    }
}

fn start_round(
    id: u64,
    states: &mut BTreeMap<u64, State>,
    pools: &mut Pools,
    q: &mut Queue,
    local_wait: &mut VecDeque<u64>,
    p: &Params,
    now: f64,
) {
    let s = states.get_mut(&id).expect("state");
    let g = s.remote.expect("drafting GPU");
    let step = pools.remote[g].mem as f64 / p.bw_hbm;
    q.push(now + p.x as f64 * step, SimEventKind::IterationTick, id, EventPayload::DraftRound);
    if s.local.is_some() {
        // cached copy still resident
        s.loaded = true;
    } else {
        local_wait.push_back(id);
        retry_local(local_wait, states, pools, q, p, now);
    }
}

fn retry_local(
    wait: &mut VecDeque<u64>,
    states: &mut BTreeMap<u64, State>,
    pools: &mut Pools,
    q: &mut Queue,
    p: &Params,
    now: f64,
) {
    let mut still = VecDeque::new();
    while let Some(id) = wait.pop_front() {
        let s = states.get_mut(&id).expect("state");
        let kv = s.req.kv_full_bytes;
        match pools.pick_local(kv) {
            Some(l) => {
                let gpu = &mut pools.local[l];
                gpu.mem += kv;
                s.local = Some(l);
                let start = now.max(gpu.link_free);
                let dt = kv as f64 / p.bw_local;
                gpu.link_free = start + dt;
                pools.link_busy += dt;
                q.push(start + dt, SimEventKind::TransferComplete, id, EventPayload::FullKv(l));
            }
            None => still.push_back(id),
        }
    }
    *wait = still;
}

fn maybe_verify(id: u64, states: &mut BTreeMap<u64, State>, pools: &mut Pools, q: &mut Queue, p: &Params, now: f64) {
    let s = &states[&id];
    if !(s.drafted && s.loaded) {
        return;
    }
    let l = s.local.expect("loaded on a local GPU");
    let t_fwd = p
        .verify_forward
        .unwrap_or((p.m + s.req.kv_full_bytes) as f64 / p.bw_hbm);
    let gpu = &mut pools.local[l];
    let start = now.max(gpu.busy_until);
    gpu.busy_until = start + t_fwd;
    q.push(start + t_fwd, SimEventKind::VerifyComplete, id, EventPayload::None);
}

/// Baseline without speculation: full KV to a local GPU over the fast link,
/// then `K` decode steps at the GPU's current occupancy.
pub(super) fn full_kv_baseline(
    cfg: &SystemConfig,
    workload: &[Request],
    opts: SimOptions,
) -> Result<SimMetrics, SimError> {
    let hw = &cfg.hardware;
    let bw_local = hw.storage_local()?;
    let bw_hbm = hw.hbm_bandwidth;
    let m = cfg.model.weights_bytes;
    let arrivals = arrival_order(workload);
    let mut pools = pools(cfg);
    let mut rec = Recorder::new(cfg.scenario(), Schedule::FullKvBaseline, arrivals.len(), pools.cap);
    let mut q = Queue::default();
    let mut states: BTreeMap<u64, (Request, f64, Option<usize>)> = BTreeMap::new();
    let mut wait: VecDeque<u64> = VecDeque::new();
    for r in &arrivals {
        if m + r.kv_full_bytes > pools.cap {
            rec.unserved += 1;
            continue;
        }
        q.push(r.arrival, SimEventKind::RequestArrival, r.id, EventPayload::None);
        states.insert(r.id, (r.clone(), 0.0, None));
    }

    let place = |wait: &mut VecDeque<u64>,
                 states: &mut BTreeMap<u64, (Request, f64, Option<usize>)>,
                 pools: &mut Pools,
                 q: &mut Queue,
                 now: f64| {
        while let Some(&id) = wait.front() {
            let kv = states[&id].0.kv_full_bytes;
            let Some(l) = pools.pick_local(kv) else { break };
            wait.pop_front();
            let gpu = &mut pools.local[l];
            gpu.mem += kv;
            gpu.active += 1;
            let start = now.max(gpu.link_free);
            let dt = kv as f64 / bw_local;
            gpu.link_free = start + dt;
            pools.link_busy += dt;
            states.get_mut(&id).expect("state").2 = Some(l);
            q.push(start + dt, SimEventKind::TransferComplete, id, EventPayload::FullKv(l));
        }
    };

    let mut events = 0u64;
    while let Some(ev) = q.pop() {
        events += 1;
        if events > opts.max_iterations {
            return Err(SimError::IterationLimit(opts.max_iterations));
        }
        let now = ev.time;
        let id = ev.request;
        match ev.kind {
            SimEventKind::RequestArrival => {
                wait.push_back(id);
                place(&mut wait, &mut states, &mut pools, &mut q, now);
            }
            SimEventKind::TransferComplete | SimEventKind::IterationTick => {
                let (r, emitted, l) = states.get_mut(&id).expect("state");
                let l = l.expect("placed");
                if ev.kind == SimEventKind::IterationTick {
                    let t = remaining(r.output_tokens, *emitted).min(1.0);
                    *emitted += t;
                    rec.tokens(now, t);
                }
                if remaining(r.output_tokens, *emitted) == 0.0 {
                    q.push(now, SimEventKind::RequestDone, id, EventPayload::None);
                } else {
                    let step = pools.local[l].mem as f64 / bw_hbm;
                    q.push(now + step, SimEventKind::IterationTick, id, EventPayload::DecodeStep);
                }
            }
            SimEventKind::RequestDone => {
                let (r, _, l) = states.get_mut(&id).expect("state");
                let l = l.take().expect("placed");
                pools.local[l].mem -= r.kv_full_bytes;
                pools.local[l].active -= 1;
                rec.done(id, now - r.arrival);
                place(&mut wait, &mut states, &mut pools, &mut q, now);
            }
            SimEventKind::VerifyComplete => unreachable!("no verification in the baseline"),
        }
        rec.hbm(pools.peak());
    }
    rec.link_busy = pools.link_busy / pools.local.len() as f64;
    Ok(rec.finish())
}
