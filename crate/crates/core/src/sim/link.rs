use std::collections::BTreeMap;

/// A single interconnect served preemptively earliest-deadline-first.
///
/// Jobs are released when added and carry an absolute deadline iteration;
/// ties go to the lower request id.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfLink {
    bandwidth: f64,
    /// `(deadline, id) -> remaining bytes`
    jobs: BTreeMap<(u64, u64), f64>,
}

/// Remaining bytes below this fraction of a job count as delivered.
const SLACK: f64 = 1e-9;

impl EdfLink {
    pub fn new(bandwidth: f64) -> Self {
        Self { bandwidth, jobs: BTreeMap::new() }
    }

    pub fn add(&mut self, id: u64, bytes: u64, deadline: u64) {
        self.jobs.insert((deadline, id), bytes as f64);
    }

    pub fn cancel(&mut self, id: u64) {
        self.jobs.retain(|k, _| k.1 != id);
    }

    pub fn pending(&self, id: u64) -> bool {
        self.jobs.keys().any(|k| k.1 == id)
    }

    pub fn is_idle(&self) -> bool {
        self.jobs.is_empty()
    }

    /// Jobs that would complete within `duration` seconds, and the link time
    /// used.
    pub fn preview(&self, duration: f64) -> (Vec<u64>, f64) {
        let mut budget = duration * self.bandwidth;
        let mut done = Vec::new();
        let mut used = 0.0;
        for (&(_, id), &rem) in &self.jobs {
            if budget <= 0.0 {
                break;
            }
            let take = rem.min(budget);
            used += take;
            budget -= take;
            if rem - take <= SLACK * rem.max(1.0) + 1.0 {
                done.push(id);
            }
        }
        (done, used / self.bandwidth)
    }

    /// Serves `duration` seconds; returns completed ids and busy seconds.
    pub fn run(&mut self, duration: f64) -> (Vec<u64>, f64) {
        let mut budget = duration * self.bandwidth;
        let mut used = 0.0;
        let mut done = Vec::new();
        let keys: Vec<(u64, u64)> = self.jobs.keys().copied().collect();
        for key in keys {
            if budget <= 0.0 {
                break;
            }
            let rem = self.jobs[&key];
            let take = rem.min(budget);
            used += take;
            budget -= take;
            if rem - take <= SLACK * rem.max(1.0) + 1.0 {
                self.jobs.remove(&key);
                done.push(key.1);
            } else {
                *self.jobs.get_mut(&key).expect("present") = rem - take;
            }
        }
        (done, used / self.bandwidth)
    }
}
