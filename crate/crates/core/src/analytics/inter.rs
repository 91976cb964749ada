use serde::Serialize;

use super::intra::t_tok;
use super::lp::{simplex_max, LpError};
use super::AnalyticsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Path {
    /// Full KV to a local GPU, plain decode.
    B1,
    /// Full KV to a remote GPU, plain decode.
    B2,
    /// Remote drafts on compressed KV, local verifies with KV kept resident.
    P1Cached,
    /// As P1, re-fetching full KV to local every round.
    P1Stateless,
    /// Remote drafts while the rest of the KV streams to it, then decodes
    /// plainly; local verifies the drafts with KV kept resident.
    P2Cached,
    P2Stateless,
}

impl Path {
    pub const ALL: [Path; 6] = [
        Path::B1,
        Path::B2,
        Path::P1Cached,
        Path::P1Stateless,
        Path::P2Cached,
        Path::P2Stateless,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Path::B1 => "B1",
            Path::B2 => "B2",
            Path::P1Cached => "P1-cached",
            Path::P1Stateless => "P1-stateless",
            Path::P2Cached => "P2-cached",
            Path::P2Stateless => "P2-stateless",
        }
    }

    pub fn parse(s: &str) -> Option<Path> {
        Path::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Seconds of link time, GPU time and slot occupancy per request.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ResourceCost {
    pub net: f64,
    pub gpu: f64,
    pub mem: f64,
}

impl ResourceCost {
    pub const ZERO: ResourceCost = ResourceCost { net: 0.0, gpu: 0.0, mem: 0.0 };

    fn is_zero(&self) -> bool {
        self.net == 0.0 && self.gpu == 0.0 && self.mem == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathCost {
    pub path: Path,
    pub local: ResourceCost,
    pub remote: ResourceCost,
}

/// Inputs to the per-path costs. Token times are per request per token at
/// the declared occupancy of each pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathParams {
    pub k: u32,
    pub x: u32,
    pub gamma: f64,
    pub c: f64,
    pub kv_full: f64,
    /// Storage → local link.
    pub bw_h: f64,
    /// Storage → remote link.
    pub bw_l: f64,
    pub t_tok_local: f64,
    pub t_tok_remote: f64,
}

impl PathParams {
    /// Token times at occupancy `b` on both pools.
    pub fn with_occupancy(mut self, weights: f64, bw_hbm: f64, b_local: f64, b_remote: f64) -> Self {
        self.t_tok_local = t_tok(weights, b_local, self.kv_full, bw_hbm);
        self.t_tok_remote = t_tok(weights, b_remote, self.kv_full, bw_hbm);
        self
    }
}

/// Per-request costs of `path`. Local terms use the local token time; remote
/// terms, and the remote drafting window that a cached local slot waits
/// through, use the remote token time.
pub fn path_costs(path: Path, p: &PathParams) -> Result<PathCost, AnalyticsError> {
    if !(p.gamma > 0.0 && p.gamma <= 1.0) {
        return Err(AnalyticsError::Invalid(format!("gamma {} must lie in (0,1]", p.gamma)));
    }
    if p.x == 0 {
        return Err(AnalyticsError::Invalid("x must be >= 1".into()));
    }
    let k = p.k as f64;
    let x = p.x as f64;
    let g = p.gamma;
    let (tl, tr) = (p.t_tok_local, p.t_tok_remote);
    let t_h = p.kv_full / p.bw_h;
    let t_l = p.kv_full / p.bw_l;
    let t_lc = p.c * p.kv_full / p.bw_l;
    let t_lrem = (1.0 - p.c) * p.kv_full / p.bw_l;
    let drafts = k / g;

    let n1 = (k / (g * x)).ceil();
    let n_draft = (t_lrem / tr).min(drafts);
    let n2 = (n_draft / x).ceil();
    let k2 = (k - g * n_draft).max(0.0);

    let p1_remote = ResourceCost { net: t_lc, gpu: drafts * tr, mem: t_lc + drafts * tr };
    let p2_remote = ResourceCost {
        net: t_lc + t_lrem,
        gpu: (n_draft + k2) * tr,
        mem: t_lc + (n_draft * tr).max(t_lrem) + k2 * tr,
    };
    let (local, remote) = match path {
        Path::B1 => (ResourceCost { net: t_h, gpu: k * tl, mem: t_h + k * tl }, ResourceCost::ZERO),
        Path::B2 => (ResourceCost::ZERO, ResourceCost { net: t_l, gpu: k * tr, mem: t_l + k * tr }),
        Path::P1Cached => (ResourceCost { net: t_h, gpu: n1 * tl, mem: t_h + drafts * tr }, p1_remote),
        Path::P1Stateless => (
            ResourceCost { net: n1 * t_h, gpu: n1 * tl, mem: n1 * (t_h + tl) },
            p1_remote,
        ),
        Path::P2Cached => (ResourceCost { net: t_h, gpu: n2 * tl, mem: t_h + n_draft * tr }, p2_remote),
        Path::P2Stateless => (
            ResourceCost { net: n2 * t_h, gpu: n2 * tl, mem: n2 * (t_h + tl) },
            p2_remote,
        ),
    };
    Ok(PathCost { path, local, remote })
}

/// Pool sizes and per-GPU slot count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Capacities {
    pub local_gpus: f64,
    pub remote_gpus: f64,
    pub b_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Constraint {
    LocalNet,
    LocalGpu,
    LocalMem,
    RemoteNet,
    RemoteGpu,
    RemoteMem,
}

impl Constraint {
    pub const ALL: [Constraint; 6] = [
        Constraint::LocalNet,
        Constraint::LocalGpu,
        Constraint::LocalMem,
        Constraint::RemoteNet,
        Constraint::RemoteGpu,
        Constraint::RemoteMem,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpSolution {
    /// Requests per second per path, in input order.
    pub rates: Vec<(Path, f64)>,
    pub throughput: f64,
    pub binding: Vec<Constraint>,
    /// Left-hand side of each capacity row at the optimum.
    pub usage: Vec<(Constraint, f64, f64)>,
}

impl LpSolution {
    pub fn rate(&self, path: Path) -> f64 {
        self.rates.iter().find(|r| r.0 == path).map_or(0.0, |r| r.1)
    }
}

/// Capacity matrix rows (local net/gpu/mem, remote net/gpu/mem) and bounds.
pub fn capacity_rows(costs: &[PathCost], caps: &Capacities) -> (Vec<Vec<f64>>, Vec<f64>) {
    let col = |f: fn(&PathCost) -> f64| costs.iter().map(f).collect::<Vec<f64>>();
    let a = vec![
        col(|p| p.local.net),
        col(|p| p.local.gpu),
        col(|p| p.local.mem),
        col(|p| p.remote.net),
        col(|p| p.remote.gpu),
        col(|p| p.remote.mem),
    ];
    let b = vec![
        caps.local_gpus,
        caps.local_gpus,
        caps.local_gpus * caps.b_max,
        caps.remote_gpus,
        caps.remote_gpus,
        caps.remote_gpus * caps.b_max,
    ];
    (a, b)
}

/// Maximizes `K·Σ n_i` over the capacity constraints at fixed costs.
pub fn optimize_inter(costs: &[PathCost], caps: &Capacities, k: u32) -> Result<LpSolution, AnalyticsError> {
    for pc in costs {
        let vals = [pc.local.net, pc.local.gpu, pc.local.mem, pc.remote.net, pc.remote.gpu, pc.remote.mem];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(AnalyticsError::Invalid(format!("path {} has a negative or non-finite cost", pc.path.name())));
        }
        if pc.local.is_zero() && pc.remote.is_zero() {
            return Err(AnalyticsError::Unbounded(pc.path.name()));
        }
    }
    let (a, b) = capacity_rows(costs, caps);
    let obj = vec![k as f64; costs.len()];
    let out = simplex_max(&a, &b, &obj).map_err(|e| match e {
        LpError::Unbounded(j) => AnalyticsError::Unbounded(costs[j].path.name()),
        LpError::Shape(s) => AnalyticsError::Invalid(s),
    })?;
    let binding = Constraint::ALL
        .into_iter()
        .zip(&out.slack)
        .zip(&b)
        .filter(|((_, s), bi)| **s <= 1e-9 * bi.max(1.0))
        .map(|((c, _), _)| c)
        .collect();
    let usage = Constraint::ALL
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, b[i] - out.slack[i], b[i]))
        .collect();
    Ok(LpSolution {
        rates: costs.iter().map(|c| c.path).zip(out.y.iter().copied()).collect(),
        throughput: out.objective,
        binding,
        usage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointSolution {
    pub solution: LpSolution,
    pub rounds: u32,
    pub converged: bool,
    pub occupancy_local: f64,
    pub occupancy_remote: f64,
}

/// Re-solves with token times evaluated at the occupancy the previous
/// solution implies (slot-seconds per second per GPU, clamped to
/// `[1, B_max]`), until throughput changes by ≤ 1e-9 relative or 50 rounds.
pub fn optimize_inter_fixed_point(
    paths: &[Path],
    params: &PathParams,
    caps: &Capacities,
    weights: f64,
    bw_hbm: f64,
) -> Result<FixedPointSolution, AnalyticsError> {
    let clamp = |v: f64| v.clamp(1.0, caps.b_max.max(1.0));
    let (mut b_l, mut b_r) = (clamp(caps.b_max), clamp(caps.b_max));
    let mut prev: Option<f64> = None;
    for round in 1..=50 {
        let p = params.with_occupancy(weights, bw_hbm, b_l, b_r);
        let costs = paths.iter().map(|&path| path_costs(path, &p)).collect::<Result<Vec<_>, _>>()?;
        let sol = optimize_inter(&costs, caps, params.k)?;
        let mem_l: f64 = costs.iter().zip(&sol.rates).map(|(c, r)| c.local.mem * r.1).sum();
        let mem_r: f64 = costs.iter().zip(&sol.rates).map(|(c, r)| c.remote.mem * r.1).sum();
        let next_l = clamp(if caps.local_gpus > 0.0 { mem_l / caps.local_gpus } else { 1.0 });
        let next_r = clamp(if caps.remote_gpus > 0.0 { mem_r / caps.remote_gpus } else { 1.0 });
        let done = prev.is_some_and(|t| (sol.throughput - t).abs() <= 1e-9 * t.abs().max(1e-300));
        if done || round == 50 {
            return Ok(FixedPointSolution {
                solution: sol,
                rounds: round,
                converged: done,
                occupancy_local: b_l,
                occupancy_remote: b_r,
            });
        }
        prev = Some(sol.throughput);
        b_l = next_l;
        b_r = next_r;
    }
    unreachable!("loop returns by round 50")
}
