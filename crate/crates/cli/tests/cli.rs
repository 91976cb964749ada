use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const LONG_CONTEXT: &str = r#"
[hardware]
hbm_bandwidth = 1714285714285.7144
interconnect_bandwidth = 5e10
gpu_mem = 96000000000

[model]
weights_bytes = 50000000000
kv_bytes_per_token = 40960

[acceptance]
kind = "per-token-iid"
per_token_prob = [{ c = 0.25, p = 0.9 }]

[runtime]
draft_length = 30
lookahead_window = 64
iteration_time_mode = "derived"
compression_ratio = 0.25

[scenario]
kind = "long-context"
batch_size = 10
kv_full_bytes = 4000000000
output_tokens = 256
"#;

const REMOTE_PREFIX: &str = r#"
[hardware]
hbm_bandwidth = 1.6e12
storage_local_bandwidth = 5e10
storage_remote_bandwidth = 5e9
gpu_mem = 96000000000
local_gpus = 2
remote_gpus = 0

[model]
weights_bytes = 50000000000
kv_bytes_per_token = 40960

[acceptance]
kind = "per-token-iid"
per_token_prob = [{ c = 0.25, p = 0.9 }]

[runtime]
draft_length = 10
lookahead_window = 64
iteration_time_mode = "derived"
compression_ratio = 0.25
aux_drafter = [{ d_e = 3, gamma_e = 0.5 }]

[scenario]
kind = "remote-prefix"
batch_size = 4
kv_full_bytes = 4000000000
output_tokens = 200
"#;

fn kvverify(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvverify")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: PathBuf) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(str::to_string).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()));
    rows
}

fn ten_request_trace(dir: &Path) -> PathBuf {
    let mut t = String::from("arrival_s,kv_full_bytes,compression_ratio,output_tokens\n");
    for _ in 0..10 {
        t.push_str("0,4000000000,0.25,256\n");
    }
    write(dir, "trace.csv", &t)
}

#[test]
fn simulate_reports_peak_hbm_per_schedule() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", LONG_CONTEXT);
    let trace = ten_request_trace(tmp.path());
    for (schedule, peak) in [("staggered", 64e9), ("lockstep", 90e9)] {
        let out = tmp.path().join(schedule);
        let o = kvverify(&["simulate", "--config", s(&cfg), "--trace", s(&trace), "--schedule", schedule, "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let report = json(out.join("report.json"));
        assert_eq!(report["subcommand"], "simulate");
        assert_eq!(report["seed"], 0);
        assert_eq!(report["payload"]["metrics"]["peak_hbm"].as_f64().unwrap(), peak);
        let rows = csv_rows(out.join("metrics.csv"));
        assert_eq!(rows[0].join(","), "schedule,B,x,c,throughput_tok_s,p50_latency_s,p99_latency_s,peak_hbm_bytes,interconnect_busy");
        assert_eq!(rows[1][0], schedule);
        assert_eq!(rows[1][1], "10");
        assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1);
    }
}

#[test]
fn simulate_csv_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", LONG_CONTEXT);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = kvverify(&["simulate", "--config", s(&cfg), "--seed", "11", "--out", s(&out)]);
        assert!(o.status.success());
        fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn validation_failures_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", LONG_CONTEXT);
    let missing = tmp.path().join("no-such-trace.csv");
    let out = tmp.path().join("out");
    let o = kvverify(&["simulate", "--config", s(&cfg), "--trace", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-trace.csv"));
    assert!(o.stdout.is_empty());

    let o = kvverify(&["simulate", "--config", s(&cfg), "--schedule", "round-robin", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let bad = write(tmp.path(), "bad.toml", &LONG_CONTEXT.replace("draft_length = 30", "draft_length = 0"));
    let o = kvverify(&["simulate", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let rp = write(tmp.path(), "rp.toml", REMOTE_PREFIX);
    let o = kvverify(&["simulate", "--config", s(&rp), "--schedule", "lockstep", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = kvverify(&["simulate", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn digest_tracks_config_fields_not_formatting() {
    let tmp = TempDir::new().unwrap();
    let digest = |text: &str, name: &str| {
        let cfg = write(tmp.path(), &format!("{name}.toml"), text);
        let out = tmp.path().join(name);
        assert!(kvverify(&["simulate", "--config", s(&cfg), "--out", s(&out)]).status.success());
        json(out.join("report.json"))["config_digest"].as_str().unwrap().to_string()
    };
    let a = digest(LONG_CONTEXT, "a");
    let b = digest(&format!("# same config\n{}", LONG_CONTEXT.replace(" = ", "=")), "b");
    let c = digest(&LONG_CONTEXT.replace("output_tokens = 256", "output_tokens = 255"), "c");
    assert!(a.starts_with("sha256:"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn analyze_intra_peaks_at_interior_draft_length() {
    let tmp = TempDir::new().unwrap();
    let table: Vec<String> = (1..=64)
        .map(|x| format!("{{ x = {x}, c = 0.25, gamma = {} }}", 0.8f64.powf((x as f64 - 1.0) / 29.0)))
        .collect();
    let text = LONG_CONTEXT
        .replace("hbm_bandwidth = 1714285714285.7144", "hbm_bandwidth = 1.6e12")
        .replace("kind = \"per-token-iid\"\nper_token_prob = [{ c = 0.25, p = 0.9 }]", &format!("kind = \"tabulated\"\ntable = [{}]", table.join(", ")))
        .replace("batch_size = 10", "batch_size = 30");
    let cfg = write(tmp.path(), "cfg.toml", &text);
    let out = tmp.path().join("intra");
    let o = kvverify(&["analyze", "--config", s(&cfg), "--mode", "intra", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(out.join("intra.csv"));
    assert_eq!(rows[0].join(","), "B_c,x,c,l,feasible,throughput_tok_s");
    let best = rows[1..]
        .iter()
        .max_by(|a, b| a[5].parse::<f64>().unwrap().total_cmp(&b[5].parse::<f64>().unwrap()))
        .unwrap();
    let x: u32 = best[1].parse().unwrap();
    assert!(x > 1 && x < 64, "max at x={x}");
    assert!(rows[1..].iter().any(|r| r[4] == "false" && r[5] == "0"));
    let report = json(out.join("report.json"));
    assert!(report["payload"]["speedup"].as_f64().unwrap() > 1.0);
}

#[test]
fn analyze_compose_reduces_without_aux_drafter() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", REMOTE_PREFIX);
    let out = tmp.path().join("compose");
    let o = kvverify(&["analyze", "--config", s(&cfg), "--mode", "compose", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(out.join("compose.csv"));
    assert_eq!(rows[0].join(","), "x,c,d_e,gamma,gamma_e,gamma_x,composed_accept_length");
    for r in &rows[1..] {
        let (gx, composed): (f64, f64) = (r[5].parse().unwrap(), r[6].parse().unwrap());
        if r[2] == "1" {
            assert_eq!(gx, composed);
        } else {
            assert!((composed - 2.0 * gx).abs() < 1e-9 * composed);
        }
    }
}

#[test]
fn analyze_inter_without_remote_pool_stays_local() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", REMOTE_PREFIX);
    let out = tmp.path().join("inter");
    let o = kvverify(&["analyze", "--config", s(&cfg), "--mode", "inter", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(out.join("inter.csv"));
    assert_eq!(rows[0].join(","), "path,rate_req_s,throughput_tok_s");
    for r in &rows[1..] {
        let rate: f64 = r[1].parse().unwrap();
        if r[0] == "B1" {
            assert!(rate > 0.0);
        } else {
            assert_eq!(rate, 0.0, "{}", r[0]);
        }
    }
}

#[test]
fn sweep_interconnect_is_monotone() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", LONG_CONTEXT);
    let out = tmp.path().join("sweep");
    let o = kvverify(&["sweep", "--config", s(&cfg), "--vary", "interconnect_bandwidth=2e10,5e10,1e11", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(out.join("sweep.csv"));
    assert_eq!(rows[0][0], "hardware.interconnect_bandwidth");
    assert_eq!(rows.len(), 4);
    let thr: Vec<f64> = rows[1..].iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(thr.windows(2).all(|w| w[1] >= w[0]), "{thr:?}");
}

#[test]
fn empty_sweep_equals_simulate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", LONG_CONTEXT);
    let (a, b) = (tmp.path().join("sweep"), tmp.path().join("sim"));
    assert!(kvverify(&["sweep", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(kvverify(&["simulate", "--config", s(&cfg), "--out", s(&b)]).status.success());
    assert_eq!(fs::read(a.join("sweep.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn sweep_rejects_unknown_keys() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.toml", LONG_CONTEXT);
    let out = tmp.path().join("sweep");
    let o = kvverify(&["sweep", "--config", s(&cfg), "--vary", "warp_factor=1,2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_factor"));
}

#[test]
fn kl_demo_columns() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("kl0");
    assert!(kvverify(&["kl-demo", "--vocab", "3", "--T", "5", "--perturbation", "0", "--out", s(&out)]).status.success());
    for r in &csv_rows(out.join("kl.csv"))[1..] {
        assert_eq!(&r[1..], ["0", "0", "0"]);
    }

    let out = tmp.path().join("kl");
    let o = kvverify(&["kl-demo", "--vocab", "4", "--T", "6", "--perturbation", "0.5", "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success());
    let rows = csv_rows(out.join("kl.csv"));
    assert_eq!(rows[0].join(","), "t,kl_direct,kl_chain,eps_bound");
    assert_eq!(rows.len(), 7);
    for r in &rows[1..] {
        let v: Vec<f64> = r[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[0] - v[1]).abs() <= 1e-10);
        assert!(v[0] >= v[2] * (1.0 - 1e-12));
    }
}

#[test]
fn kl_demo_guard_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("kl");
    let o = kvverify(&["kl-demo", "--vocab", "8", "--T", "7", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("guard"));
}
