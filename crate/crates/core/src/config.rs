//! Domain types shared by every subsystem, plus loading and validation of the
//! TOML system configuration.
//!
//! Byte quantities are `u64`; times and bandwidths are `f64` (seconds and
//! bytes per second). Everything here is immutable once validated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::CompressorConfig;

/// Ratios closer than this are treated as the same table key.
const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{field} is required for scenario {scenario}")]
    MissingForScenario {
        field: &'static str,
        scenario: &'static str,
    },
    #[error("no acceptance entry for x={x}, c={c}")]
    AcceptanceLookup { x: u32, c: f64 },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be a positive finite number, got {v}")))
    }
}

fn check_ratio(name: &str, c: f64) -> Result<(), ConfigError> {
    if c.is_finite() && c > 0.0 && c <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} out of (0,1]")))
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(format!("{name} out of [0,1]: {p}")))
    }
}

/// Bandwidths, HBM capacity and GPU pool sizes of the serving deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub hbm_bandwidth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interconnect_bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_local_bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_remote_bandwidth: Option<f64>,
    pub gpu_mem: u64,
    #[serde(default = "default_local_gpus")]
    pub local_gpus: u32,
    #[serde(default)]
    pub remote_gpus: u32,
}

fn default_local_gpus() -> u32 {
    1
}

impl HardwareProfile {
    pub fn interconnect(&self) -> Result<f64, ConfigError> {
        self.interconnect_bandwidth
            .ok_or(ConfigError::MissingForScenario {
                field: "interconnect_bandwidth",
                scenario: Scenario::LongContext.name(),
            })
    }

    pub fn storage_local(&self) -> Result<f64, ConfigError> {
        self.storage_local_bandwidth
            .ok_or(ConfigError::MissingForScenario {
                field: "storage_local_bandwidth",
                scenario: Scenario::RemotePrefix.name(),
            })
    }

    pub fn storage_remote(&self) -> Result<f64, ConfigError> {
        self.storage_remote_bandwidth
            .ok_or(ConfigError::MissingForScenario {
                field: "storage_remote_bandwidth",
                scenario: Scenario::RemotePrefix.name(),
            })
    }

    fn validate(&self, scenario: Scenario) -> Result<(), ConfigError> {
        positive("hbm_bandwidth", self.hbm_bandwidth)?;
        for (name, bw) in [
            ("interconnect_bandwidth", self.interconnect_bandwidth),
            ("storage_local_bandwidth", self.storage_local_bandwidth),
            ("storage_remote_bandwidth", self.storage_remote_bandwidth),
        ] {
            if let Some(bw) = bw {
                positive(name, bw)?;
            }
        }
        if self.gpu_mem == 0 {
            return Err(invalid("gpu_mem must be > 0"));
        }
        if self.local_gpus as u64 + self.remote_gpus as u64 == 0 {
            return Err(invalid("local_gpus + remote_gpus must be >= 1"));
        }
        match scenario {
            Scenario::LongContext => {
                self.interconnect()?;
            }
            Scenario::RemotePrefix => {
                let high = self.storage_local()?;
                let low = self.storage_remote()?;
                if high <= low {
                    return Err(invalid(
                        "storage_local_bandwidth must exceed storage_remote_bandwidth",
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub weights_bytes: u64,
    pub kv_bytes_per_token: u64,
}

impl ModelSpec {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.weights_bytes == 0 || self.kv_bytes_per_token == 0 {
            return Err(invalid("weights_bytes and kv_bytes_per_token must be > 0"));
        }
        Ok(())
    }
}

/// Full KV footprint of a context of `context_tokens` tokens.
pub fn kv_full_bytes(model: &ModelSpec, context_tokens: u64) -> u64 {
    model.kv_bytes_per_token * context_tokens
}

/// One serving request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival: f64,
    pub kv_full_bytes: u64,
    pub compression_ratio: f64,
    pub output_tokens: u32,
    pub speculating: bool,
}

impl Request {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.arrival.is_finite() && self.arrival >= 0.0) {
            return Err(invalid(format!("request {}: arrival must be >= 0", self.id)));
        }
        if self.kv_full_bytes == 0 {
            return Err(invalid(format!("request {}: kv_full_bytes must be > 0", self.id)));
        }
        check_ratio("compression_ratio", self.compression_ratio)?;
        if self.output_tokens == 0 {
            return Err(invalid(format!("request {}: output_tokens must be >= 1", self.id)));
        }
        Ok(())
    }

    /// Size of the compressed cache, `c * KV_full` rounded to whole bytes.
    pub fn compressed_bytes(&self) -> u64 {
        (self.kv_full_bytes as f64 * self.compression_ratio).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbPoint {
    pub c: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPoint {
    pub x: u32,
    pub c: f64,
    pub gamma: f64,
}

/// Acceptance-rate model `γ(x, c)`.
///
/// `PerTokenIid` treats every drafted token as accepted independently with
/// probability `p(c)`, so the accepted run is a geometric run truncated at `x`.
/// `Tabulated` replays measured points; lookups match `c` exactly and take the
/// nearest tabulated `x` (ties resolve to the smaller `x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AcceptanceModel {
    PerTokenIid { per_token_prob: Vec<ProbPoint> },
    Tabulated { table: Vec<GammaPoint> },
}

impl AcceptanceModel {
    /// Constant per-token probability for every ratio.
    pub fn iid(points: &[(f64, f64)]) -> Self {
        AcceptanceModel::PerTokenIid {
            per_token_prob: points.iter().map(|&(c, p)| ProbPoint { c, p }).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            AcceptanceModel::PerTokenIid { per_token_prob } => {
                for (i, pt) in per_token_prob.iter().enumerate() {
                    check_ratio("compression_ratio", pt.c)?;
                    check_prob("per_token_prob", pt.p)?;
                    if is_uncompressed(pt.c) && pt.p != 1.0 {
                        return Err(invalid("per_token_prob at c=1 must be 1"));
                    }
                    if per_token_prob[..i].iter().any(|q| same_ratio(q.c, pt.c)) {
                        return Err(invalid(format!("duplicate per_token_prob entry for c={}", pt.c)));
                    }
                }
            }
            AcceptanceModel::Tabulated { table } => {
                for (i, pt) in table.iter().enumerate() {
                    check_ratio("compression_ratio", pt.c)?;
                    check_prob("gamma", pt.gamma)?;
                    if pt.x == 0 {
                        return Err(invalid("tabulated x must be >= 1"));
                    }
                    if is_uncompressed(pt.c) && pt.gamma != 1.0 {
                        return Err(invalid("gamma at c=1 must be 1"));
                    }
                    if table[..i].iter().any(|q| q.x == pt.x && same_ratio(q.c, pt.c)) {
                        return Err(invalid(format!(
                            "duplicate gamma entry for x={}, c={}",
                            pt.x, pt.c
                        )));
                    }
                }
                for a in table {
                    for b in table {
                        if same_ratio(a.c, b.c) && a.x < b.x && a.gamma < b.gamma {
                            return Err(invalid(format!(
                                "gamma must be non-increasing in x (c={}: x={} -> {}, x={} -> {})",
                                a.c, a.x, a.gamma, b.x, b.gamma
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-token acceptance probability implied for draft length `x` at ratio `c`.
    ///
    /// For the tabulated kind this inverts `γ = (Σ_{k=1..x} p^k)/x` by bisection.
    pub fn per_token_prob(&self, x: u32, c: f64) -> Result<f64, ConfigError> {
        match self {
            AcceptanceModel::PerTokenIid { per_token_prob } => {
                match per_token_prob.iter().find(|pt| same_ratio(pt.c, c)) {
                    Some(pt) => Ok(pt.p),
                    None if is_uncompressed(c) => Ok(1.0),
                    None => Err(ConfigError::AcceptanceLookup { x, c }),
                }
            }
            AcceptanceModel::Tabulated { .. } => {
                let gamma = expected_gamma(self, x, c)?;
                Ok(invert_truncated_geometric(gamma, x))
            }
        }
    }
}

fn same_ratio(a: f64, b: f64) -> bool {
    (a - b).abs() <= RATIO_EPS
}

fn is_uncompressed(c: f64) -> bool {
    same_ratio(c, 1.0)
}

/// Mean accepted fraction of a truncated geometric run: `(Σ_{k=1..x} p^k) / x`.
pub fn truncated_geometric_gamma(p: f64, x: u32) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for _ in 0..x {
        term *= p;
        sum += term;
    }
    sum / x as f64
}

fn invert_truncated_geometric(gamma: f64, x: u32) -> f64 {
    if gamma >= 1.0 {
        return 1.0;
    }
    if gamma <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_geometric_gamma(mid, x) < gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Expected acceptance rate `γ(x, c)` under `model`.
pub fn expected_gamma(model: &AcceptanceModel, x: u32, c: f64) -> Result<f64, ConfigError> {
    if x == 0 {
        return Err(invalid("draft_length must be >= 1"));
    }
    check_ratio("compression_ratio", c)?;
    match model {
        AcceptanceModel::PerTokenIid { .. } => {
            let p = model.per_token_prob(x, c)?;
            Ok(truncated_geometric_gamma(p, x))
        }
        AcceptanceModel::Tabulated { table } => {
            let best = table
                .iter()
                .filter(|pt| same_ratio(pt.c, c))
                .min_by_key(|pt| (pt.x.abs_diff(x), pt.x));
            match best {
                Some(pt) => Ok(pt.gamma),
                None if is_uncompressed(c) => Ok(1.0),
                None => Err(ConfigError::AcceptanceLookup { x, c }),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    LongContext,
    RemotePrefix,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::LongContext => "long-context",
            Scenario::RemotePrefix => "remote-prefix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationTimeMode {
    /// Recomputed every iteration from the current batch composition.
    Derived,
    /// Constant `fixed_iteration_time_s`.
    Fixed,
}

/// How the simulators realize acceptance per verify round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptanceDraws {
    /// Per-token Bernoulli draws from a seeded generator.
    #[default]
    Sampled,
    /// Use the expectation `γ(x,c)·x` (fractional tokens allowed).
    DeterministicMean,
}

/// One point of an auxiliary drafter curve `γ_e(d_e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxDrafterPoint {
    pub d_e: u32,
    pub gamma_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    pub draft_length: u32,
    pub lookahead_window: u32,
    pub iteration_time_mode: IterationTimeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_iteration_time_s: Option<f64>,
    pub compression_ratio: f64,
    #[serde(default)]
    pub acceptance_draws: AcceptanceDraws,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux_drafter: Vec<AuxDrafterPoint>,
}

/// Scenario selection plus the homogeneous workload used by analysis and
/// synthetic sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: Scenario,
    #[serde(default = "default_batch")]
    pub batch_size: u32,
    pub kv_full_bytes: u64,
    pub output_tokens: u32,
    /// Verify forward-pass time for the remote-prefix pipeline; derived from
    /// one HBM pass over weights and full KV when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_forward_s: Option<f64>,
    /// Keep verify KV resident on the local GPU between rounds.
    #[serde(default)]
    pub cached_verify: bool,
}

fn default_batch() -> u32 {
    1
}

/// Fully validated system configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub hardware: HardwareProfile,
    pub model: ModelSpec,
    pub acceptance: AcceptanceModel,
    pub runtime: RuntimeConfig,
    pub scenario: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<CompressorConfig>,
}

impl SystemConfig {
    pub fn draft_length(&self) -> u32 {
        self.runtime.draft_length
    }

    pub fn lookahead_window(&self) -> u32 {
        self.runtime.lookahead_window
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario.kind
    }

    /// Compression ratio used for synthetic workloads: the compressor's
    /// effective ratio when one is configured, else `runtime.compression_ratio`.
    pub fn effective_ratio(&self) -> f64 {
        self.compressor
            .as_ref()
            .map(|c| c.effective_ratio())
            .unwrap_or(self.runtime.compression_ratio)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let scenario = self.scenario.kind;
        self.hardware.validate(scenario)?;
        self.model.validate()?;
        self.acceptance.validate()?;

        let rt = &self.runtime;
        if rt.draft_length == 0 {
            return Err(invalid("draft_length must be >= 1"));
        }
        if rt.lookahead_window < 2 {
            return Err(invalid("lookahead_window must be >= 2"));
        }
        match (rt.iteration_time_mode, rt.fixed_iteration_time_s) {
            (IterationTimeMode::Fixed, None) => {
                return Err(invalid("fixed_iteration_time_s is required when iteration_time_mode = \"fixed\""))
            }
            (_, Some(t)) => positive("fixed_iteration_time_s", t)?,
            _ => {}
        }
        check_ratio("compression_ratio", rt.compression_ratio)?;
        for pt in &rt.aux_drafter {
            if pt.d_e == 0 {
                return Err(invalid("aux_drafter d_e must be >= 1"));
            }
            check_prob("gamma_e", pt.gamma_e)?;
        }

        let sc = &self.scenario;
        if sc.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if sc.kv_full_bytes == 0 {
            return Err(invalid("kv_full_bytes must be > 0"));
        }
        if sc.output_tokens == 0 {
            return Err(invalid("output_tokens must be >= 1"));
        }
        if let Some(t) = sc.verify_forward_s {
            if !(t.is_finite() && t >= 0.0) {
                return Err(invalid("verify_forward_s must be >= 0"));
            }
        }
        if let Some(comp) = &self.compressor {
            comp.validate()
                .map_err(|e| invalid(format!("compressor: {e}")))?;
        }
        Ok(())
    }

    /// Canonical TOML rendering; `load_config(&cfg.to_toml())` returns `cfg`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Homogeneous workload of `batch_size` requests arriving at t = 0.
    pub fn homogeneous_workload(&self) -> Vec<Request> {
        (0..self.scenario.batch_size as u64)
            .map(|id| Request {
                id,
                arrival: 0.0,
                kv_full_bytes: self.scenario.kv_full_bytes,
                compression_ratio: self.effective_ratio(),
                output_tokens: self.scenario.output_tokens,
                speculating: true,
            })
            .collect()
    }
}

/// Parses and validates a TOML configuration document.
pub fn load_config(text: &str) -> Result<SystemConfig, ConfigError> {
    let cfg: SystemConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
