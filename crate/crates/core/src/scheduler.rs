//! Lookahead resource rings, verify-slot admission and the per-iteration
//! execution step.
//!
//! The rings cover `W` future iterations. Window 0 is the iteration currently
//! executing. The BW ring records interconnect time reserved in each window
//! and the HBM ring records in-flight full-KV bytes held in each window. A
//! reservation for request `r` verifying at window `d` charges every window
//! of `[d - S_r + 1, d]` on both rings.
//!
//! Interconnect charges are stored as fixed-point fractions of a window
//! (`BW_UNITS_PER_WINDOW` units = one full window) so that release is an exact
//! integer subtraction and the `T[i] <= T_iter` constraint keeps holding when
//! `T_iter` is re-derived between iterations.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::config::Request;

/// Fixed-point scale of one window of interconnect time.
pub const BW_UNITS_PER_WINDOW: u64 = 1 << 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("no live reservation for request {0}")]
    UnknownReservation(u64),
    #[error("ring invariant violated: {0}")]
    Violation(String),
}

/// Iteration-equivalent reload length `ℓ_r = bytes / (BW · T_iter)` and the
/// number of windows it spans, `S_r = max(1, ⌈ℓ_r⌉)`.
pub fn reload_span(kv_full_bytes: u64, bandwidth: f64, iteration_time: f64) -> (f64, u32) {
    let load = kv_full_bytes as f64 / (bandwidth * iteration_time);
    let span = (load.ceil() as u32).max(1);
    (load, span)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reservation {
    pub request_id: u64,
    /// Absolute iteration of the verify (`d_r` relative to the ring origin at
    /// admission time).
    pub verify_iteration: u64,
    pub span_len: u32,
    pub load: f64,
    pub bw_units_per_window: u64,
    pub bytes: u64,
    /// Ring iteration time when the reservation was made.
    pub iteration_time: f64,
}

impl Reservation {
    pub fn first_iteration(&self) -> u64 {
        self.verify_iteration + 1 - self.span_len as u64
    }

    /// Interconnect seconds committed to each window of the span. The total
    /// over the span covers the reload at link bandwidth.
    pub fn per_window_bw(&self) -> f64 {
        self.bw_units_per_window as f64 / BW_UNITS_PER_WINDOW as f64 * self.iteration_time
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdmitOutcome {
    Reserved(Reservation),
    Waiting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReserveRings {
    window: usize,
    origin: u64,
    bw: VecDeque<u64>,
    hbm: VecDeque<u64>,
    iteration_time: f64,
    link_bandwidth: f64,
    hbm_capacity: u64,
    weights_bytes: u64,
    kv_resident: u64,
    live: BTreeMap<u64, Reservation>,
}

impl ReserveRings {
    pub fn new(
        window: usize,
        iteration_time: f64,
        link_bandwidth: f64,
        hbm_capacity: u64,
        weights_bytes: u64,
    ) -> Self {
        assert!(window >= 2, "lookahead window must be >= 2");
        assert!(iteration_time > 0.0 && link_bandwidth > 0.0);
        Self {
            window,
            origin: 0,
            bw: VecDeque::from(vec![0; window]),
            hbm: VecDeque::from(vec![0; window]),
            iteration_time,
            link_bandwidth,
            hbm_capacity,
            weights_bytes,
            kv_resident: 0,
            live: BTreeMap::new(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Absolute iteration number of window 0.
    pub fn origin(&self) -> u64 {
        self.origin
    }

    pub fn iteration_time(&self) -> f64 {
        self.iteration_time
    }

    pub fn set_iteration_time(&mut self, t: f64) {
        assert!(t > 0.0 && t.is_finite());
        self.iteration_time = t;
    }

    pub fn link_bandwidth(&self) -> f64 {
        self.link_bandwidth
    }

    pub fn hbm_capacity(&self) -> u64 {
        self.hbm_capacity
    }

    pub fn weights_bytes(&self) -> u64 {
        self.weights_bytes
    }

    pub fn kv_resident(&self) -> u64 {
        self.kv_resident
    }

    /// Reserved interconnect seconds `T[i]`.
    pub fn bw_reserved(&self, i: usize) -> f64 {
        self.bw[i] as f64 / BW_UNITS_PER_WINDOW as f64 * self.iteration_time
    }

    /// Link seconds the live reservations covering window `i` were promised.
    /// Differs from [`Self::bw_reserved`] once the iteration time is re-derived.
    pub fn committed_link_seconds(&self, i: usize) -> f64 {
        let abs = self.origin + i as u64;
        self.live
            .values()
            .filter(|r| r.first_iteration() <= abs && abs <= r.verify_iteration)
            .map(Reservation::per_window_bw)
            .sum()
    }

    pub fn bw_units(&self, i: usize) -> u64 {
        self.bw[i]
    }

    /// In-flight bytes `B[i]`.
    pub fn hbm_inflight(&self, i: usize) -> u64 {
        self.hbm[i]
    }

    pub fn live(&self) -> impl Iterator<Item = &Reservation> {
        self.live.values()
    }

    pub fn reservation(&self, request_id: u64) -> Option<&Reservation> {
        self.live.get(&request_id)
    }

    /// Window index of absolute iteration `abs`, if it lies in the ring.
    pub fn window_of(&self, abs: u64) -> Option<usize> {
        let rel = abs.checked_sub(self.origin)? as usize;
        (rel < self.window).then_some(rel)
    }

    /// Occupies `bytes` of persistent residency if it fits next to every
    /// window's in-flight bytes.
    pub fn try_add_resident(&mut self, bytes: u64) -> bool {
        let peak = self.hbm.iter().copied().max().unwrap_or(0);
        let need = self.weights_bytes + self.kv_resident + bytes + peak;
        if need <= self.hbm_capacity {
            self.kv_resident += bytes;
            true
        } else {
            false
        }
    }

    pub fn remove_resident(&mut self, bytes: u64) {
        self.kv_resident = self
            .kv_resident
            .checked_sub(bytes)
            .expect("resident bytes underflow");
    }

    /// Overwrites the charges of one window; for building test fixtures.
    pub fn preload_window(&mut self, i: usize, bw_units: u64, hbm_bytes: u64) {
        self.bw[i] = bw_units;
        self.hbm[i] = hbm_bytes;
    }

    fn span_fits(&self, first: usize, last: usize, units: u64, bytes: u64) -> bool {
        let base = self.weights_bytes + self.kv_resident;
        (first..=last).all(|i| {
            self.bw[i] + units <= BW_UNITS_PER_WINDOW && base + self.hbm[i] + bytes <= self.hbm_capacity
        })
    }

    fn apply(&mut self, res: &Reservation, sign_add: bool) {
        let first = res.first_iteration();
        for abs in first..=res.verify_iteration {
            if let Some(i) = self.window_of(abs) {
                if sign_add {
                    self.bw[i] += res.bw_units_per_window;
                    self.hbm[i] += res.bytes;
                } else {
                    self.bw[i] -= res.bw_units_per_window;
                    self.hbm[i] -= res.bytes;
                }
            }
        }
    }

    /// Undoes (or consumes) a live reservation.
    pub fn release(&mut self, request_id: u64) -> Result<Reservation, SchedulerError> {
        let res = self
            .live
            .remove(&request_id)
            .ok_or(SchedulerError::UnknownReservation(request_id))?;
        self.apply(&res, false);
        Ok(res)
    }

    /// Retires window 0 and opens an empty window at `W - 1`. Reservations
    /// whose verify window was retired while still live are removed and
    /// returned: their transfer did not complete in time.
    pub fn advance(&mut self) -> Vec<Reservation> {
        let retiring = self.origin;
        let late: Vec<u64> = self
            .live
            .values()
            .filter(|r| r.verify_iteration <= retiring)
            .map(|r| r.request_id)
            .collect();
        let late = late
            .into_iter()
            .map(|id| self.live.remove(&id).expect("listed above"))
            .collect();
        self.bw.pop_front();
        self.hbm.pop_front();
        self.bw.push_back(0);
        self.hbm.push_back(0);
        self.origin += 1;
        late
    }

    /// Checks both ring constraints on every window and that the ring mass
    /// equals the mass of live reservations.
    pub fn check_invariants(&self) -> Result<(), SchedulerError> {
        let base = self.weights_bytes + self.kv_resident;
        for i in 0..self.window {
            if self.bw[i] > BW_UNITS_PER_WINDOW {
                return Err(SchedulerError::Violation(format!(
                    "BW ring window {i}: {} units > {BW_UNITS_PER_WINDOW}",
                    self.bw[i]
                )));
            }
            if base + self.hbm[i] > self.hbm_capacity {
                return Err(SchedulerError::Violation(format!(
                    "HBM ring window {i}: {} + {} > {}",
                    base, self.hbm[i], self.hbm_capacity
                )));
            }
        }
        let mut bw = vec![0u64; self.window];
        let mut hbm = vec![0u64; self.window];
        for res in self.live.values() {
            for abs in res.first_iteration()..=res.verify_iteration {
                if let Some(i) = self.window_of(abs) {
                    bw[i] += res.bw_units_per_window;
                    hbm[i] += res.bytes;
                }
            }
        }
        if bw.iter().ne(self.bw.iter()) || hbm.iter().ne(self.hbm.iter()) {
            return Err(SchedulerError::Violation(
                "ring mass differs from live reservation mass".into(),
            ));
        }
        Ok(())
    }
}

/// Candidate verify windows: anchor, anchor-1, anchor+1, anchor-2, anchor+2, …
/// restricted to `[lo, hi]`.
pub fn candidate_order(anchor: usize, lo: usize, hi: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if lo > hi {
        return out;
    }
    let anchor = anchor.clamp(lo, hi);
    out.push(anchor);
    for k in 1.. {
        let below = anchor.checked_sub(k).filter(|&d| d >= lo);
        let above = Some(anchor + k).filter(|&d| d <= hi);
        if below.is_none() && above.is_none() {
            break;
        }
        out.extend(below);
        out.extend(above);
    }
    out
}

/// Admission with a hook observing every candidate window examined.
pub fn admit_with_probe<P: FnMut(usize)>(
    request: &Request,
    rings: &mut ReserveRings,
    anchor_x: u32,
    mut probe: P,
) -> AdmitOutcome {
    let (load, span) = reload_span(request.kv_full_bytes, rings.link_bandwidth, rings.iteration_time);
    let span_len = span as usize;
    if span_len > rings.window - 1 {
        return AdmitOutcome::Waiting;
    }
    let frac = load / span as f64;
    let units = ((frac * BW_UNITS_PER_WINDOW as f64).ceil() as u64).min(BW_UNITS_PER_WINDOW);
    for d in candidate_order(anchor_x as usize, span_len, rings.window - 1) {
        probe(d);
        let first = d + 1 - span_len;
        if rings.span_fits(first, d, units, request.kv_full_bytes) {
            let res = Reservation {
                request_id: request.id,
                verify_iteration: rings.origin + d as u64,
                span_len: span,
                load,
                bw_units_per_window: units,
                bytes: request.kv_full_bytes,
                iteration_time: rings.iteration_time,
            };
            rings.apply(&res, true);
            rings.live.insert(request.id, res.clone());
            return AdmitOutcome::Reserved(res);
        }
    }
    AdmitOutcome::Waiting
}

/// Reserves the first feasible verify window for `request`, searching outward
/// from `clamp(anchor_x, S_r, W-1)`, earlier before later at equal distance.
/// Rings are untouched when the request has to wait.
pub fn admit(request: &Request, rings: &mut ReserveRings, anchor_x: u32) -> AdmitOutcome {
    admit_with_probe(request, rings, anchor_x, |_| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionMode {
    Speculative,
    Waiting,
    NonSpeculating,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecSession {
    pub request: Request,
    pub mode: SessionMode,
    /// Fractional when acceptance is realized by its expectation.
    pub tokens_emitted: f64,
    /// Tokens drafted since the last verify.
    pub drafted: u32,
    pub pending_reservation: Option<Reservation>,
    /// Bytes this session keeps resident in HBM (0 until admitted).
    pub resident_bytes: u64,
}

impl SpecSession {
    pub fn id(&self) -> u64 {
        self.request.id
    }

    /// Verify due at or before iteration `t`.
    pub fn verify_due(&self, t: u64) -> bool {
        self.mode == SessionMode::Speculative
            && self
                .pending_reservation
                .as_ref()
                .is_some_and(|r| r.verify_iteration <= t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReloadStart {
    pub request_id: u64,
    pub bytes: u64,
    pub deadline_iteration: u64,
}

/// Work the current iteration will contain, before any verify outcome.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepPlan {
    pub iteration: u64,
    pub reload_starts: Vec<ReloadStart>,
    pub due_verifies: Vec<u64>,
    pub drafting: Vec<u64>,
    pub decoding: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    pub tokens: f64,
    pub finished: bool,
}

/// Callbacks through which the driver supplies transfer state and token
/// outcomes to [`Scheduler::execution_step`].
pub trait StepHooks {
    fn transfer_ready(&self, request_id: u64) -> bool;
    fn on_verify(&mut self, session: &SpecSession, drafted: u32) -> RoundOutcome;
    fn on_decode(&mut self, session: &SpecSession) -> RoundOutcome;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub reload_starts: Vec<ReloadStart>,
    pub verifies: Vec<u64>,
    pub stalled: Vec<u64>,
    pub drafting: Vec<u64>,
    pub decoding: Vec<u64>,
    /// `(request, admitted)` for every re-admission attempt after a verify.
    pub readmissions: Vec<(u64, bool)>,
    pub late: Vec<u64>,
    pub finished: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scheduler {
    pub rings: ReserveRings,
    draft_length: u32,
    sessions: BTreeMap<u64, SpecSession>,
    waiting: VecDeque<u64>,
    check_every_step: bool,
}

impl Scheduler {
    pub fn new(rings: ReserveRings, draft_length: u32) -> Self {
        assert!(draft_length >= 1);
        Self {
            rings,
            draft_length,
            sessions: BTreeMap::new(),
            waiting: VecDeque::new(),
            check_every_step: cfg!(debug_assertions),
        }
    }

    /// Forces the per-step ring check on (or off) regardless of build profile.
    pub fn with_invariant_checks(mut self, on: bool) -> Self {
        self.check_every_step = on;
        self
    }

    pub fn draft_length(&self) -> u32 {
        self.draft_length
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SpecSession> {
        self.sessions.values()
    }

    pub fn session(&self, id: u64) -> Option<&SpecSession> {
        self.sessions.get(&id)
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn is_idle(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Adds an arriving request to the back of the waiting queue.
    pub fn enqueue(&mut self, request: Request) {
        let id = request.id;
        let mode = if request.speculating {
            SessionMode::Waiting
        } else {
            SessionMode::NonSpeculating
        };
        let prev = self.sessions.insert(
            id,
            SpecSession {
                request,
                mode,
                tokens_emitted: 0.0,
                drafted: 0,
                pending_reservation: None,
                resident_bytes: 0,
            },
        );
        assert!(prev.is_none(), "duplicate request id {id}");
        self.waiting.push_back(id);
    }

    /// One admission attempt per waiting request, in FIFO order. Returns
    /// `(request, admitted)` per attempt.
    pub fn admit_waiting(&mut self) -> Vec<(u64, bool)> {
        let queue: Vec<u64> = self.waiting.drain(..).collect();
        let mut out = Vec::with_capacity(queue.len());
        for id in queue {
            let admitted = self.try_admit(id);
            if !admitted {
                self.waiting.push_back(id);
            }
            out.push((id, admitted));
        }
        self.debug_check();
        out
    }

    fn try_admit(&mut self, id: u64) -> bool {
        let session = self.sessions.get_mut(&id).expect("queued session exists");
        let need_resident = session.resident_bytes == 0;
        let resident = if session.request.speculating {
            session.request.compressed_bytes()
        } else {
            session.request.kv_full_bytes
        };
        if need_resident && !self.rings.try_add_resident(resident) {
            return false;
        }
        if !session.request.speculating {
            session.resident_bytes = resident;
            return true;
        }
        match admit(&session.request, &mut self.rings, self.draft_length) {
            AdmitOutcome::Reserved(res) => {
                session.resident_bytes = resident;
                session.mode = SessionMode::Speculative;
                session.pending_reservation = Some(res);
                true
            }
            AdmitOutcome::Waiting => {
                if need_resident {
                    self.rings.remove_resident(resident);
                }
                false
            }
        }
    }

    /// Classifies the current iteration's work without mutating state.
    pub fn plan(&self) -> StepPlan {
        let t = self.rings.origin();
        let mut plan = StepPlan {
            iteration: t,
            ..Default::default()
        };
        for s in self.sessions.values() {
            match s.mode {
                SessionMode::NonSpeculating if s.resident_bytes > 0 => plan.decoding.push(s.id()),
                SessionMode::Speculative => {
                    let res = s.pending_reservation.as_ref().expect("speculative has reservation");
                    if res.first_iteration() == t {
                        plan.reload_starts.push(ReloadStart {
                            request_id: s.id(),
                            bytes: res.bytes,
                            deadline_iteration: res.verify_iteration,
                        });
                    }
                    if res.verify_iteration <= t {
                        plan.due_verifies.push(s.id());
                    } else {
                        plan.drafting.push(s.id());
                    }
                }
                _ => {}
            }
        }
        plan
    }

    /// Runs one iteration: kick off reloads, draft, verify due sessions whose
    /// transfer is ready, advance the rings, then re-admit verified sessions.
    pub fn execution_step<H: StepHooks>(&mut self, hooks: &mut H) -> StepReport {
        let plan = self.plan();
        let t = plan.iteration;
        let mut report = StepReport {
            iteration: t,
            reload_starts: plan.reload_starts,
            drafting: plan.drafting.clone(),
            decoding: Vec::new(),
            ..Default::default()
        };

        for id in &plan.drafting {
            self.sessions.get_mut(id).expect("planned").drafted += 1;
        }

        let mut finished = Vec::new();
        for id in plan.decoding {
            let s = &self.sessions[&id];
            let out = hooks.on_decode(s);
            let s = self.sessions.get_mut(&id).expect("planned");
            s.tokens_emitted += out.tokens;
            report.decoding.push(id);
            if out.finished {
                finished.push(id);
            }
        }

        let mut verified = Vec::new();
        for id in plan.due_verifies {
            if !hooks.transfer_ready(id) {
                report.stalled.push(id);
                continue;
            }
            if self.rings.reservation(id).is_some() {
                self.rings.release(id).expect("live reservation");
            }
            let s = &self.sessions[&id];
            let drafted = s.drafted;
            let out = hooks.on_verify(s, drafted);
            let s = self.sessions.get_mut(&id).expect("planned");
            s.tokens_emitted += out.tokens;
            s.drafted = 0;
            s.pending_reservation = None;
            report.verifies.push(id);
            if out.finished {
                finished.push(id);
            } else {
                s.mode = SessionMode::Waiting;
                verified.push(id);
            }
        }

        for id in &finished {
            let s = self.sessions.remove(id).expect("finished session exists");
            if let Some(res) = &s.pending_reservation {
                if self.rings.reservation(res.request_id).is_some() {
                    self.rings.release(res.request_id).expect("live");
                }
            }
            self.rings.remove_resident(s.resident_bytes);
        }
        report.finished = finished;

        report.late = self.rings.advance().into_iter().map(|r| r.request_id).collect();

        for id in verified {
            let admitted = self.try_admit(id);
            if !admitted {
                self.waiting.push_back(id);
            }
            report.readmissions.push((id, admitted));
        }
        self.debug_check();
        report
    }

    fn debug_check(&self) {
        if self.check_every_step {
            if let Err(e) = self.rings.check_invariants() {
                panic!("{e}");
            }
        }
    }
}
