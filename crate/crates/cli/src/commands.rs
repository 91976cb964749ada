use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use kvverify::analytics::{
    baseline_throughput, composed_accept_length, intra_throughput, optimize_inter, optimize_inter_fixed_point,
    optimize_intra, path_costs, t_tok, AcceptanceCurve, AnalyticsError, Capacities, IntraGrid, IntraKnobs,
    IntraParams, Path as ServePath, PathParams,
};
use kvverify::config::{expected_gamma, AcceptanceModel, Request};
use kvverify::sim::{baseline_batch_cap, simulate as run_sim, Schedule, SimError, SimMetrics, SimOptions};
use kvverify::specloop::{cumulative_kl_chain, min_per_step_kl, sequence_kl_direct, KlError, ToyAutoregressiveModel};
use kvverify::trace::parse_trace;
use kvverify::{load_config, SystemConfig};

use crate::report::{config_digest, Output, RunReport};
use crate::sweep::{parse_axis, points, set, Axis};
use crate::{CliError, Mode};

pub const METRICS_HEADER: [&str; 9] = [
    "schedule",
    "B",
    "x",
    "c",
    "throughput_tok_s",
    "p50_latency_s",
    "p99_latency_s",
    "peak_hbm_bytes",
    "interconnect_busy",
];

fn read(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<(String, SystemConfig), CliError> {
    let text = read(path, "config")?;
    let cfg = load_config(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((text, cfg))
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::IterationLimit(_) | SimError::Scheduler(_) => CliError::internal(e),
        _ => CliError::usage(e),
    }
}

fn analytics_error(e: AnalyticsError) -> CliError {
    match e {
        AnalyticsError::Unbounded(_) => CliError::internal(e),
        _ => CliError::usage(e),
    }
}

fn metrics_row(m: &SimMetrics, cfg: &SystemConfig, workload: &[Request]) -> Vec<String> {
    let c = if workload.is_empty() {
        cfg.effective_ratio()
    } else {
        workload.iter().map(|r| r.compression_ratio).sum::<f64>() / workload.len() as f64
    };
    vec![
        m.schedule.name().to_string(),
        workload.len().to_string(),
        cfg.draft_length().to_string(),
        c.to_string(),
        m.throughput.to_string(),
        m.p50_latency.to_string(),
        m.p99_latency.to_string(),
        m.peak_hbm.to_string(),
        m.interconnect_busy_fraction.to_string(),
    ]
}

fn parse_schedule(name: &str) -> Result<Schedule, CliError> {
    Schedule::parse(name).ok_or_else(|| {
        let names: Vec<&str> = Schedule::ALL.iter().map(|s| s.name()).collect();
        CliError::usage(format!("unknown schedule {name:?}; expected one of {}", names.join(", ")))
    })
}

fn opts(seed: u64) -> SimOptions {
    SimOptions { check_invariants: false, ..SimOptions::seeded(seed) }
}

#[derive(Serialize)]
struct SimulatePayload<'a> {
    schedule: &'static str,
    trace: Option<String>,
    metrics: &'a SimMetrics,
}

pub fn simulate(config: &Path, trace: Option<&Path>, schedule: &str, seed: u64, out: &Path) -> Result<String, CliError> {
    let start = Instant::now();
    let (_, cfg) = load(config)?;
    let schedule = parse_schedule(schedule)?;
    let workload = match trace {
        Some(p) => parse_trace(&read(p, "trace")?).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
        None => cfg.homogeneous_workload(),
    };
    let metrics = run_sim(&cfg, &workload, schedule, opts(seed)).map_err(sim_error)?;
    let out = Output::create(out)?;
    out.csv("metrics.csv", &METRICS_HEADER, &[metrics_row(&metrics, &cfg, &workload)])?;
    out.json(
        "report.json",
        &RunReport {
            tool: "kvverify",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "simulate",
            config_digest: Some(config_digest(&cfg)),
            seed,
            payload: SimulatePayload {
                schedule: schedule.name(),
                trace: trace.map(|p| p.display().to_string()),
                metrics: &metrics,
            },
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(format!(
        "{} {}: {:.3} tok/s, peak HBM {} B",
        cfg.scenario().name(),
        schedule.name(),
        metrics.throughput,
        metrics.peak_hbm
    ))
}

/// Compression ratios the acceptance model can answer for, excluding the
/// uncompressed point.
fn model_ratios(model: &AcceptanceModel) -> Vec<f64> {
    let mut cs: Vec<f64> = match model {
        AcceptanceModel::PerTokenIid { per_token_prob } => per_token_prob.iter().map(|p| p.c).collect(),
        AcceptanceModel::Tabulated { table } => table.iter().map(|p| p.c).collect(),
    };
    cs.retain(|&c| c < 1.0);
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    cs
}

fn intra_params(cfg: &SystemConfig) -> IntraParams {
    IntraParams {
        weights: cfg.model.weights_bytes as f64,
        kv_full: cfg.scenario.kv_full_bytes as f64,
        gpu_mem: cfg.hardware.gpu_mem as f64,
        bw_hbm: cfg.hardware.hbm_bandwidth,
        bw_inter: cfg.hardware.interconnect_bandwidth.unwrap_or(0.0),
    }
}

#[derive(Serialize)]
struct IntraPayload {
    batch: u32,
    params: IntraParams,
    grid: IntraGrid,
    baseline_throughput: f64,
    optimum: kvverify::analytics::IntraOptimum,
    speedup: f64,
    /// Best throughput at each draft length, in grid order.
    best_by_x: Vec<(u32, f64)>,
}

fn analyze_intra(cfg: &SystemConfig, out: &Output) -> Result<(IntraPayload, String), CliError> {
    let params = intra_params(cfg);
    let b = cfg.scenario.batch_size;
    let cs = model_ratios(&cfg.acceptance);
    if cs.is_empty() {
        return Err(CliError::usage("acceptance model has no compressed (c < 1) entries to sweep"));
    }
    let grid = IntraGrid { c: cs, ..IntraGrid::default_for(b) };
    let gamma: &dyn AcceptanceCurve = &cfg.acceptance;
    let mut rows = Vec::new();
    let mut best_by_x: Vec<(u32, f64)> = grid.x.iter().map(|&x| (x, 0.0)).collect();
    for b_c in 0..=b {
        for (xi, &x) in grid.x.iter().enumerate() {
            for &c in &grid.c {
                for &l in &grid.l {
                    let eval = intra_throughput(&IntraKnobs::new(b_c, x, c, l), &params, b, gamma)
                        .map_err(analytics_error)?;
                    let (feasible, thr) = match eval {
                        Ok(e) => (true, e.throughput),
                        Err(_) => (false, 0.0),
                    };
                    if feasible {
                        best_by_x[xi].1 = best_by_x[xi].1.max(thr);
                    }
                    rows.push(vec![
                        b_c.to_string(),
                        x.to_string(),
                        c.to_string(),
                        l.to_string(),
                        feasible.to_string(),
                        thr.to_string(),
                    ]);
                }
            }
        }
    }
    let csv = out.csv("intra.csv", &["B_c", "x", "c", "l", "feasible", "throughput_tok_s"], &rows)?;
    let optimum = optimize_intra(&params, &grid, gamma).map_err(analytics_error)?;
    let base = baseline_throughput(&params);
    let speedup = if base > 0.0 { optimum.eval.throughput / base } else { f64::INFINITY };
    let summary = format!(
        "intra optimum {:.3} tok/s at B_c={} x={} c={} l={} ({:.3}x baseline); wrote {}",
        optimum.eval.throughput,
        optimum.knobs.offloaded,
        optimum.knobs.x,
        optimum.knobs.c(),
        optimum.knobs.l,
        speedup,
        csv.display()
    );
    Ok((IntraPayload { batch: b, params, grid, baseline_throughput: base, optimum, speedup, best_by_x }, summary))
}

#[derive(Serialize)]
struct InterPayload {
    params: PathParams,
    capacities: Capacities,
    costs: Vec<kvverify::analytics::PathCost>,
    solution: kvverify::analytics::LpSolution,
    fixed_point: Option<kvverify::analytics::FixedPointSolution>,
}

fn analyze_inter(cfg: &SystemConfig, out: &Output) -> Result<(InterPayload, String), CliError> {
    let hw = &cfg.hardware;
    let bw_h = hw.storage_local().map_err(CliError::usage)?;
    let bw_l = hw.storage_remote().map_err(CliError::usage)?;
    let m = cfg.model.weights_bytes;
    let kv = cfg.scenario.kv_full_bytes;
    let b_max = baseline_batch_cap(hw.gpu_mem, m, kv);
    if b_max == 0 {
        return Err(CliError::usage("no request fits: gpu_mem - weights_bytes < kv_full_bytes"));
    }
    let x = cfg.draft_length();
    let c = cfg.effective_ratio();
    let gamma = expected_gamma(&cfg.acceptance, x, c).map_err(CliError::usage)?;
    let t = t_tok(m as f64, b_max as f64, kv as f64, hw.hbm_bandwidth);
    let params = PathParams {
        k: cfg.scenario.output_tokens,
        x,
        gamma,
        c,
        kv_full: kv as f64,
        bw_h,
        bw_l,
        t_tok_local: t,
        t_tok_remote: t,
    };
    let caps = Capacities { local_gpus: hw.local_gpus as f64, remote_gpus: hw.remote_gpus as f64, b_max: b_max as f64 };
    let costs = ServePath::ALL
        .iter()
        .map(|&p| path_costs(p, &params))
        .collect::<Result<Vec<_>, _>>()
        .map_err(analytics_error)?;
    let solution = optimize_inter(&costs, &caps, params.k).map_err(analytics_error)?;
    let fixed_point =
        optimize_inter_fixed_point(&ServePath::ALL, &params, &caps, m as f64, hw.hbm_bandwidth).ok();
    let rows: Vec<Vec<String>> = solution
        .rates
        .iter()
        .map(|(p, r)| vec![p.name().to_string(), r.to_string(), (r * params.k as f64).to_string()])
        .collect();
    let csv = out.csv("inter.csv", &["path", "rate_req_s", "throughput_tok_s"], &rows)?;
    let summary = format!("inter optimum {:.3} tok/s; wrote {}", solution.throughput, csv.display());
    Ok((InterPayload { params, capacities: caps, costs, solution, fixed_point }, summary))
}

#[derive(Serialize)]
struct ComposeRow {
    x: u32,
    c: f64,
    d_e: u32,
    gamma: f64,
    gamma_e: f64,
    gamma_x: f64,
    composed_accept_length: f64,
}

fn analyze_compose(cfg: &SystemConfig, out: &Output) -> Result<(Vec<ComposeRow>, String), CliError> {
    let c = cfg.effective_ratio();
    let mut d_es: Vec<u32> = std::iter::once(1).chain(cfg.runtime.aux_drafter.iter().map(|p| p.d_e)).collect();
    d_es.sort_unstable();
    d_es.dedup();
    let mut rows = Vec::new();
    for x in 1..=64 {
        let gamma = expected_gamma(&cfg.acceptance, x, c).map_err(CliError::usage)?;
        for &d_e in &d_es {
            let gamma_e = kvverify::analytics::aux_gamma(&cfg.runtime.aux_drafter, d_e).map_err(analytics_error)?;
            rows.push(ComposeRow {
                x,
                c,
                d_e,
                gamma,
                gamma_e,
                gamma_x: gamma * x as f64,
                composed_accept_length: composed_accept_length(x, gamma, d_e, gamma_e),
            });
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.x.to_string(),
                r.c.to_string(),
                r.d_e.to_string(),
                r.gamma.to_string(),
                r.gamma_e.to_string(),
                r.gamma_x.to_string(),
                r.composed_accept_length.to_string(),
            ]
        })
        .collect();
    let csv = out.csv(
        "compose.csv",
        &["x", "c", "d_e", "gamma", "gamma_e", "gamma_x", "composed_accept_length"],
        &table,
    )?;
    Ok((rows, format!("compose: {} rows; wrote {}", table.len(), csv.display())))
}

pub fn analyze(config: &Path, mode: Mode, out_dir: &Path) -> Result<String, CliError> {
    let start = Instant::now();
    let (_, cfg) = load(config)?;
    let out = Output::create(out_dir)?;
    let digest = Some(config_digest(&cfg));
    let envelope = |subcommand, payload| RunReport {
        tool: "kvverify",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        config_digest: digest.clone(),
        seed: 0,
        payload,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let summary = match mode {
        Mode::Intra => {
            let (p, s) = analyze_intra(&cfg, &out)?;
            out.json("report.json", &envelope("analyze-intra", serde_json::to_value(p).map_err(CliError::internal)?))?;
            s
        }
        Mode::Inter => {
            let (p, s) = analyze_inter(&cfg, &out)?;
            out.json("report.json", &envelope("analyze-inter", serde_json::to_value(p).map_err(CliError::internal)?))?;
            s
        }
        Mode::Compose => {
            let (p, s) = analyze_compose(&cfg, &out)?;
            out.json("report.json", &envelope("analyze-compose", serde_json::to_value(p).map_err(CliError::internal)?))?;
            s
        }
    };
    Ok(summary)
}

#[derive(Serialize)]
struct SweepPoint {
    values: Vec<(String, String)>,
    config_digest: String,
    metrics: SimMetrics,
}

pub fn sweep(config: &Path, vary: &[String], seed: u64, out_dir: &Path) -> Result<String, CliError> {
    let start = Instant::now();
    let (text, base_cfg) = load(config)?;
    let doc: toml::Table = text.parse().map_err(|e| CliError::usage(format!("{}: {e}", config.display())))?;
    let axes: Vec<Axis> = vary.iter().map(|v| parse_axis(v, &doc)).collect::<Result<_, _>>()?;
    let schedule = Schedule::Staggered;
    let mut header: Vec<String> = axes.iter().map(Axis::name).collect();
    header.extend(METRICS_HEADER.iter().map(|s| s.to_string()));
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for point in points(&axes) {
        let mut doc = doc.clone();
        for (axis, v) in axes.iter().zip(&point) {
            set(&mut doc, &axis.path, v);
        }
        let rendered = toml::to_string(&doc).map_err(CliError::internal)?;
        let label: Vec<String> = axes.iter().zip(&point).map(|(a, v)| format!("{}={v}", a.name())).collect();
        let cfg = load_config(&rendered).map_err(|e| CliError::usage(format!("[{}]: {e}", label.join(", "))))?;
        let workload = cfg.homogeneous_workload();
        let metrics = run_sim(&cfg, &workload, schedule, opts(seed))
            .map_err(|e| {
                let code = sim_error(e);
                CliError { code: code.code, error: code.error.context(format!("[{}]", label.join(", "))) }
            })?;
        let mut row: Vec<String> = point.iter().map(|v| v.to_string()).collect();
        row.extend(metrics_row(&metrics, &cfg, &workload));
        rows.push(row);
        results.push(SweepPoint {
            values: axes.iter().zip(&point).map(|(a, v)| (a.name(), v.to_string())).collect(),
            config_digest: config_digest(&cfg),
            metrics,
        });
    }
    let out = Output::create(out_dir)?;
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let csv = out.csv("sweep.csv", &header_refs, &rows)?;
    out.json(
        "report.json",
        &RunReport {
            tool: "kvverify",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "sweep",
            config_digest: Some(config_digest(&base_cfg)),
            seed,
            payload: results,
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(format!("sweep: {} points; wrote {}", rows.len(), csv.display()))
}

#[derive(Serialize)]
struct KlRow {
    t: usize,
    kl_direct: f64,
    kl_chain: f64,
    eps_bound: f64,
}

#[derive(Serialize)]
struct KlPayload {
    vocab: usize,
    horizon: usize,
    perturbation: f64,
    /// Smallest per-step KL over all prefixes; cumulative KL at `t` is at
    /// least `eps · t`.
    eps: f64,
    rows: Vec<KlRow>,
}

fn kl_error(e: KlError) -> CliError {
    CliError::usage(e)
}

pub fn kl_demo(vocab: usize, horizon: usize, perturbation: f64, seed: u64, out_dir: &Path) -> Result<String, CliError> {
    let start = Instant::now();
    if horizon == 0 {
        return Err(CliError::usage("--T must be >= 1"));
    }
    if !(perturbation.is_finite() && perturbation >= 0.0) {
        return Err(CliError::usage("--perturbation must be a finite number >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = ToyAutoregressiveModel::random(vocab, horizon, &mut rng).map_err(kl_error)?;
    let lossy = full.perturbed(perturbation, &mut rng);
    let chain = cumulative_kl_chain(&full, &lossy, horizon).map_err(kl_error)?;
    let eps = min_per_step_kl(&full, &lossy, horizon).map_err(kl_error)?;
    let mut rows = Vec::with_capacity(horizon);
    for (i, c) in chain.iter().enumerate() {
        let t = i + 1;
        let direct = sequence_kl_direct(&full, &lossy, t).map_err(kl_error)?;
        let (Some(d), Some(c)) = (direct.finite(), c.finite()) else {
            return Err(CliError::internal("toy models have full support; KL must be finite"));
        };
        rows.push(KlRow { t, kl_direct: d, kl_chain: c, eps_bound: eps * t as f64 });
    }
    let out = Output::create(out_dir)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.t.to_string(), r.kl_direct.to_string(), r.kl_chain.to_string(), r.eps_bound.to_string()])
        .collect();
    let csv = out.csv("kl.csv", &["t", "kl_direct", "kl_chain", "eps_bound"], &table)?;
    let last = rows.last().map_or(0.0, |r| r.kl_direct);
    out.json(
        "report.json",
        &RunReport {
            tool: "kvverify",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "kl-demo",
            config_digest: None,
            seed,
            payload: KlPayload { vocab, horizon, perturbation, eps, rows },
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(format!("kl-demo: KL at T={horizon} is {last:.6e} nats; wrote {}", csv.display()))
}

