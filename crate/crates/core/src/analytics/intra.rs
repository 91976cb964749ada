use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use super::{AcceptanceCurve, AnalyticsError};

/// Average HBM footprint of an offloaded request over a draft/verify cycle:
/// `kv·(x·c + 1)/(x + 1)`.
pub fn kv_avg(x: u32, c: f64, kv_full: f64) -> f64 {
    let x = x as f64;
    kv_full * (x * c + 1.0) / (x + 1.0)
}

/// Staggered iteration time:
/// `max((M + B·kv·(c + 1/x))/BW_hbm, B·kv/(x·BW_inter))`.
pub fn t_iter_staggered(m: f64, b: f64, kv_full: f64, c: f64, x: u32, bw_hbm: f64, bw_inter: f64) -> f64 {
    let x = x as f64;
    let gpu = (m + b * kv_full * (c + 1.0 / x)) / bw_hbm;
    let xfer = b * kv_full / (x * bw_inter);
    gpu.max(xfer)
}

/// Per-request per-token decode time at batch occupancy `b`: `(M/b + kv)/BW_hbm`.
pub fn t_tok(m: f64, b: f64, kv_full: f64, bw_hbm: f64) -> f64 {
    assert!(b >= 1.0, "occupancy must be >= 1");
    (m / b + kv_full) / bw_hbm
}

/// Remote-prefix request latency:
/// `c·kv/BW_l + (K/(x·γ))·(max(x·T_dec, kv/BW_h) + T_fwd)`.
#[allow(clippy::too_many_arguments)]
pub fn t_req_remote(
    kv_full: f64,
    c: f64,
    k: u32,
    x: u32,
    gamma: f64,
    bw_l: f64,
    bw_h: f64,
    t_decode: f64,
    t_fwd: f64,
) -> f64 {
    let x = x as f64;
    let startup = c * kv_full / bw_l;
    let cycle = (x * t_decode).max(kv_full / bw_h) + t_fwd;
    startup + k as f64 / (x * gamma) * cycle
}

/// Deployment constants for the intra-request model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntraParams {
    pub weights: f64,
    pub kv_full: f64,
    pub gpu_mem: f64,
    pub bw_hbm: f64,
    pub bw_inter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct IntraKnobs {
    /// Offloaded requests `B_c`; the other `B − B_c` keep full KV resident.
    pub offloaded: u32,
    pub x: u32,
    /// Stored in parts per million so knob tuples order totally.
    pub c_ppm: u32,
    /// Iterations one reload spans.
    pub l: u32,
}

impl IntraKnobs {
    pub fn new(offloaded: u32, x: u32, c: f64, l: u32) -> Self {
        Self {
            offloaded,
            x,
            c_ppm: (c * 1e6).round() as u32,
            l,
        }
    }

    pub fn c(&self) -> f64 {
        self.c_ppm as f64 / 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
pub enum Infeasible {
    #[error("knobs out of range: {0}")]
    Knobs(String),
    #[error("HBM needs {need:.0} bytes, capacity {cap:.0}")]
    Memory { need: f64, cap: f64 },
    #[error("reload load {value} exceeds one in-flight reload")]
    Load { value: f64 },
    #[error("offloading needs a nonzero interconnect")]
    NoInterconnect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntraEval {
    pub throughput: f64,
    pub t_gpu: f64,
    pub t_xfer: f64,
    pub tokens_per_iter: f64,
    pub gamma: f64,
}

fn evaluate(knobs: &IntraKnobs, p: &IntraParams, batch: u32, gamma: f64) -> Result<IntraEval, Infeasible> {
    let b_c = knobs.offloaded as f64;
    let b_g = batch as f64 - b_c;
    let x = knobs.x as f64;
    let c = knobs.c();
    let l = knobs.l as f64;
    if knobs.offloaded > batch || batch == 0 {
        return Err(Infeasible::Knobs(format!("B_c={} with B={batch}", knobs.offloaded)));
    }
    if knobs.x == 0 || knobs.l == 0 {
        return Err(Infeasible::Knobs("x and l must be >= 1".into()));
    }
    if knobs.offloaded > 0 && !(c > 0.0 && c < 1.0) {
        return Err(Infeasible::Knobs(format!("c={c} must lie in (0,1)")));
    }
    let avg = if knobs.offloaded > 0 { kv_avg(knobs.x, c, p.kv_full) } else { p.kv_full };
    let need = p.weights + b_g * p.kv_full + b_c * avg;
    if need > p.gpu_mem {
        return Err(Infeasible::Memory { need, cap: p.gpu_mem });
    }
    let load = b_c * l / (x + 1.0);
    if load > 1.0 + 1e-12 {
        return Err(Infeasible::Load { value: load });
    }
    let t_xfer = if knobs.offloaded == 0 {
        0.0
    } else if p.bw_inter <= 0.0 {
        return Err(Infeasible::NoInterconnect);
    } else {
        b_c * (1.0 - c) * p.kv_full / ((x + 1.0) * p.bw_inter * l)
    };
    let t_gpu = need / p.bw_hbm;
    let tokens = b_g + b_c * (gamma * x + 1.0) / (x + 1.0);
    Ok(IntraEval {
        throughput: tokens / t_gpu.max(t_xfer),
        t_gpu,
        t_xfer,
        tokens_per_iter: tokens,
        gamma,
    })
}

/// Throughput (tokens/s) of `batch` requests of which `knobs.offloaded` are
/// offloaded and speculate; the rest decode on resident full KV.
///
/// `T_gpu = (M + B_g·kv + B_c·kv_avg)/BW_hbm`,
/// `T_xfer = B_c·(1−c)·kv/((x+1)·BW_inter·ℓ)`, tokens per iteration
/// `B_g + B_c·(γx+1)/(x+1)`, subject to HBM capacity and
/// `B_c·ℓ/(x+1) ≤ 1`. With `B_c = B` this is the all-offloaded objective;
/// with `B_c = 0` it is the full-KV baseline.
pub fn intra_throughput<G: AcceptanceCurve + ?Sized>(
    knobs: &IntraKnobs,
    params: &IntraParams,
    batch: u32,
    gamma: &G,
) -> Result<Result<IntraEval, Infeasible>, AnalyticsError> {
    let g = if knobs.offloaded > 0 {
        gamma.gamma(knobs.x, knobs.c())?
    } else {
        1.0
    };
    Ok(evaluate(knobs, params, batch, g))
}

/// Full-KV baseline at the largest batch that fits: `B_max / T_iter`.
pub fn baseline_throughput(params: &IntraParams) -> f64 {
    let b_max = ((params.gpu_mem - params.weights) / params.kv_full).floor().max(0.0);
    if b_max < 1.0 {
        return 0.0;
    }
    b_max * params.bw_hbm / (params.weights + b_max * params.kv_full)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntraGrid {
    pub batch: Vec<u32>,
    pub x: Vec<u32>,
    pub c: Vec<f64>,
    pub l: Vec<u32>,
}

impl IntraGrid {
    /// x ∈ 1..=64, c ∈ {0.1,…,0.9}, ℓ ∈ 1..=8 at a single batch size.
    pub fn default_for(batch: u32) -> Self {
        Self {
            batch: vec![batch],
            x: (1..=64).collect(),
            c: (1..=9).map(|i| i as f64 / 10.0).collect(),
            l: (1..=8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntraOptimum {
    pub batch: u32,
    pub knobs: IntraKnobs,
    pub eval: IntraEval,
    pub evaluated: u64,
    pub feasible: u64,
}

/// Exhaustive search over the grid (with `B_c` ranging over `0..=B`). Ties
/// resolve to the lexicographically smallest `(B, B_c, x, c, ℓ)`.
pub fn optimize_intra<G: AcceptanceCurve + ?Sized>(
    params: &IntraParams,
    grid: &IntraGrid,
    gamma: &G,
) -> Result<IntraOptimum, AnalyticsError> {
    let mut gammas: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut best: Option<IntraOptimum> = None;
    let mut evaluated = 0;
    let mut feasible = 0;
    let mut batches = grid.batch.clone();
    batches.sort_unstable();
    batches.dedup();
    for &b in &batches {
        for b_c in 0..=b {
            for &x in &grid.x {
                for &c in &grid.c {
                    for &l in &grid.l {
                        let knobs = IntraKnobs::new(b_c, x, c, l);
                        evaluated += 1;
                        let g = if b_c == 0 {
                            1.0
                        } else {
                            match gammas.get(&(x, knobs.c_ppm)) {
                                Some(g) => *g,
                                None => {
                                    let g = gamma.gamma(x, knobs.c())?;
                                    gammas.insert((x, knobs.c_ppm), g);
                                    g
                                }
                            }
                        };
                        let Ok(eval) = evaluate(&knobs, params, b, g) else { continue };
                        feasible += 1;
                        let better = match &best {
                            None => true,
                            Some(cur) => {
                                eval.throughput > cur.eval.throughput
                                    || (eval.throughput == cur.eval.throughput
                                        && (b, knobs) < (cur.batch, cur.knobs))
                            }
                        };
                        if better {
                            best = Some(IntraOptimum { batch: b, knobs, eval, evaluated: 0, feasible: 0 });
                        }
                    }
                }
            }
        }
    }
    let mut best = best.ok_or(AnalyticsError::NoFeasiblePoint)?;
    best.evaluated = evaluated;
    best.feasible = feasible;
    Ok(best)
}
