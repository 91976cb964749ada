//! KV compressor interface over synthetic KV metadata.
//!
//! No tensor values exist: a cache is described by its shape, and a
//! compressed cache by the positions it dropped and its bit width. Three toy
//! policies exercise the interface: uniform random dropping, sink + sliding
//! window dropping, and uniform k-bit quantization.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Scenario;

/// Baseline bit width of an uncompressed element.
pub const BASE_BITS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressorError {
    #[error("ratio {0} must lie in (0,1)")]
    Ratio(f64),
    #[error("ratio {ratio} retains less than one token per head for a {tokens}-token context")]
    TooFewTokens { ratio: f64, tokens: u32 },
    #[error("{0} is not supported by an offline compressor")]
    Unsupported(&'static str),
    #[error("request offsets must partition the batch: {0}")]
    Offsets(String),
    #[error("a run uses exactly one compressor kind, got {0:?}")]
    Mixed(Vec<CompressorKind>),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressorKind {
    DropUniform,
    DropWindow,
    QuantUniform,
}

impl CompressorKind {
    pub fn is_dropping(self) -> bool {
        !matches!(self, CompressorKind::QuantUniform)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressorMode {
    #[default]
    Offline,
    Online,
}

/// `kind` accepts a single name or a list; lists are only valid with one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KindField {
    One(CompressorKind),
    Many(Vec<CompressorKind>),
}

/// The `[compressor]` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorConfig {
    pub kind: KindField,
    /// Retained fraction for dropping policies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    /// Bits per element for quantization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    #[serde(default)]
    pub mode: CompressorMode,
    /// Per-iteration cost of online compression, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overhead_s: Option<f64>,
    /// Always-retained leading positions (drop-window).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink: Option<u32>,
    /// Online retained-token budget per head (drop-window); defaults to
    /// `ratio × context`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompressorConfig {
    /// The single configured kind, rejecting empty or multi-kind lists.
    pub fn kind(&self) -> Result<CompressorKind, CompressorError> {
        match &self.kind {
            KindField::One(k) => Ok(*k),
            KindField::Many(v) if v.len() == 1 => Ok(v[0]),
            KindField::Many(v) => Err(CompressorError::Mixed(v.clone())),
        }
    }

    pub fn validate(&self) -> Result<(), CompressorError> {
        let kind = self.kind()?;
        match kind {
            CompressorKind::QuantUniform => {
                let bits = self
                    .bits
                    .ok_or_else(|| CompressorError::Invalid("quant-uniform requires bits".into()))?;
                if !(1..BASE_BITS).contains(&bits) {
                    return Err(CompressorError::Invalid(format!("bits must lie in 1..{BASE_BITS}, got {bits}")));
                }
                if self.mode == CompressorMode::Online {
                    return Err(CompressorError::Invalid("quant-uniform is offline only".into()));
                }
            }
            _ => {
                let r = self
                    .ratio
                    .ok_or_else(|| CompressorError::Invalid("dropping compressors require ratio".into()))?;
                check_ratio(r)?;
                if let (Some(s), Some(w)) = (self.sink, self.window) {
                    if s >= w {
                        return Err(CompressorError::Invalid("sink must be smaller than window".into()));
                    }
                }
            }
        }
        if let Some(o) = self.overhead_s {
            if !(o.is_finite() && o >= 0.0) {
                return Err(CompressorError::Invalid("overhead_s must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Compressed-to-full size ratio `c` this compressor realizes.
    pub fn effective_ratio(&self) -> f64 {
        match self.kind() {
            Ok(CompressorKind::QuantUniform) => self.bits.unwrap_or(BASE_BITS) as f64 / BASE_BITS as f64,
            _ => self.ratio.unwrap_or(1.0),
        }
    }

    /// Per-iteration overhead the simulator adds (online mode only).
    pub fn iteration_overhead(&self) -> f64 {
        match self.mode {
            CompressorMode::Online => self.overhead_s.unwrap_or(0.0),
            CompressorMode::Offline => 0.0,
        }
    }

    pub fn spec(&self, scenario: Scenario) -> Result<CompressorSpec, CompressorError> {
        self.validate()?;
        Ok(CompressorSpec {
            scenario,
            mode: self.mode,
            ratio: self.effective_ratio(),
            overhead_s: self.iteration_overhead(),
        })
    }

    pub fn build(&self, scenario: Scenario) -> Result<Compressor, CompressorError> {
        let spec = self.spec(scenario)?;
        let policy = match self.kind()? {
            CompressorKind::DropUniform => Policy::DropUniform { seed: self.seed.unwrap_or(0) },
            CompressorKind::DropWindow => Policy::DropWindow {
                sink: self.sink.unwrap_or(4),
                window: self.window,
            },
            CompressorKind::QuantUniform => Policy::Quant { bits: self.bits.expect("validated") },
        };
        Ok(Compressor { spec, policy })
    }
}

fn check_ratio(r: f64) -> Result<(), CompressorError> {
    if r > 0.0 && r < 1.0 {
        Ok(())
    } else {
        Err(CompressorError::Ratio(r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressorSpec {
    pub scenario: Scenario,
    pub mode: CompressorMode,
    pub ratio: f64,
    pub overhead_s: f64,
}

/// Shape of an uncompressed (16-bit) KV cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticKv {
    pub layers: u32,
    pub heads: u32,
    pub tokens: u32,
    /// Elements per token per head (K and V together); a multiple of 8 so
    /// every bit width gives whole bytes.
    pub elements: u32,
}

impl SyntheticKv {
    pub fn new(layers: u32, heads: u32, tokens: u32, elements: u32) -> Self {
        assert!(elements.is_multiple_of(8), "elements per token per head must be a multiple of 8");
        Self { layers, heads, tokens, elements }
    }

    pub fn token_head_bytes(&self, bits: u32) -> u64 {
        self.elements as u64 * bits as u64 / 8
    }

    pub fn full_bytes(&self) -> u64 {
        self.layers as u64 * self.tokens as u64 * self.heads as u64 * self.token_head_bytes(BASE_BITS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedKvMeta {
    pub shape: SyntheticKv,
    /// `dropped_indices[layer][head]`, sorted ascending.
    pub dropped_indices: Vec<Vec<Vec<u32>>>,
    pub bit_scheme: u32,
    pub payload_bytes: u64,
}

impl CompressedKvMeta {
    /// Retained tokens per head in `layer`, or `None` if heads disagree.
    pub fn retained(&self, layer: usize) -> Option<u32> {
        let counts: BTreeSet<usize> = self.dropped_indices[layer].iter().map(Vec::len).collect();
        match counts.len() {
            0 => Some(self.shape.tokens),
            1 => Some(self.shape.tokens - *counts.first().expect("one") as u32),
            _ => None,
        }
    }

    pub fn expected_payload(&self) -> u64 {
        (0..self.shape.layers as usize)
            .map(|l| {
                self.retained(l).expect("equal head counts") as u64
                    * self.shape.heads as u64
                    * self.shape.token_head_bytes(self.bit_scheme)
            })
            .sum()
    }

    /// Every head of every layer drops the same number of tokens and the
    /// payload matches the retained tokens at `bit_scheme`.
    pub fn check(&self) -> Result<(), CompressorError> {
        for l in 0..self.shape.layers as usize {
            if self.retained(l).is_none() {
                return Err(CompressorError::Invalid(format!("layer {l}: unequal per-head drop counts")));
            }
        }
        if self.payload_bytes != self.expected_payload() {
            return Err(CompressorError::Invalid("payload bytes disagree with retained tokens".into()));
        }
        Ok(())
    }

    /// Appends per-head drops from [`Compressor::update`] and shrinks the
    /// payload accordingly.
    pub fn apply_drops(&mut self, layer: usize, drops: &[Vec<u32>]) {
        for (head, new) in self.dropped_indices[layer].iter_mut().zip(drops) {
            head.extend_from_slice(new);
            head.sort_unstable();
        }
        self.payload_bytes = self.expected_payload();
    }
}

/// Result of decompression: the 16-bit size and, for dropping policies, the
/// positions that cannot be recovered.
#[derive(Debug, Clone, PartialEq)]
pub struct Decompressed {
    pub shape: SyntheticKv,
    pub bytes: u64,
    pub dropped_indices: Vec<Vec<Vec<u32>>>,
}

/// One request's state in the layer being updated.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerContext {
    pub context_len: u32,
    /// Already-dropped positions, per head.
    pub dropped: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Policy {
    DropUniform { seed: u64 },
    DropWindow { sink: u32, window: Option<u32> },
    Quant { bits: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressor {
    spec: CompressorSpec,
    policy: Policy,
}

impl Compressor {
    pub fn spec(&self) -> &CompressorSpec {
        &self.spec
    }

    fn retained_target(&self, tokens: u32) -> Result<u32, CompressorError> {
        if tokens == 0 {
            return Ok(0);
        }
        let keep = (self.spec.ratio * tokens as f64).round();
        if keep < 1.0 {
            return Err(CompressorError::TooFewTokens { ratio: self.spec.ratio, tokens });
        }
        Ok(keep as u32)
    }

    pub fn compress(&self, kv: &SyntheticKv) -> Result<CompressedKvMeta, CompressorError> {
        check_ratio(self.spec.ratio)?;
        let layers = kv.layers as usize;
        let heads = kv.heads as usize;
        let (dropped, bits) = match &self.policy {
            Policy::Quant { bits } => (vec![vec![Vec::new(); heads]; layers], *bits),
            Policy::DropUniform { seed } => {
                let keep = self.retained_target(kv.tokens)?;
                let n_drop = (kv.tokens - keep) as usize;
                let dropped = (0..layers)
                    .map(|l| {
                        (0..heads)
                            .map(|h| {
                                let mut rng = head_rng(*seed, l, h);
                                let mut v: Vec<u32> = sample(&mut rng, kv.tokens as usize, n_drop)
                                    .into_iter()
                                    .map(|i| i as u32)
                                    .collect();
                                v.sort_unstable();
                                v
                            })
                            .collect()
                    })
                    .collect();
                (dropped, BASE_BITS)
            }
            Policy::DropWindow { sink, .. } => {
                let keep = self.retained_target(kv.tokens)?;
                let drops = window_drops(kv.tokens, &[], *sink, keep);
                (vec![vec![drops; heads]; layers], BASE_BITS)
            }
        };
        let mut meta = CompressedKvMeta {
            shape: *kv,
            dropped_indices: dropped,
            bit_scheme: bits,
            payload_bytes: 0,
        };
        meta.payload_bytes = meta.expected_payload();
        Ok(meta)
    }

    pub fn decompress(&self, meta: &CompressedKvMeta) -> Decompressed {
        let bytes = if meta.bit_scheme == 0 {
            0
        } else {
            meta.payload_bytes * BASE_BITS as u64 / meta.bit_scheme as u64
        };
        Decompressed {
            shape: meta.shape,
            bytes,
            dropped_indices: meta.dropped_indices.clone(),
        }
    }

    /// New drops for each request in the batch at `layer`. `offsets[i]` is the
    /// slice of batch rows owned by `contexts[i]`; together they must tile
    /// `0..batch_len` in order. Returns `[request][head] -> positions`.
    pub fn update(
        &self,
        layer: usize,
        contexts: &[LayerContext],
        offsets: &[Range<usize>],
    ) -> Result<Vec<Vec<Vec<u32>>>, CompressorError> {
        if self.spec.mode == CompressorMode::Offline {
            return Err(CompressorError::Unsupported("update"));
        }
        check_offsets(offsets, contexts.len())?;
        let mut out = Vec::with_capacity(contexts.len());
        for (req, ctx) in contexts.iter().enumerate() {
            let budget = match &self.policy {
                Policy::DropWindow { window: Some(w), .. } => *w,
                _ => self.retained_target(ctx.context_len)?,
            };
            let per_head = ctx
                .dropped
                .iter()
                .enumerate()
                .map(|(h, already)| match &self.policy {
                    Policy::DropWindow { sink, .. } => window_drops(ctx.context_len, already, *sink, budget),
                    Policy::DropUniform { seed } => {
                        let gone: BTreeSet<u32> = already.iter().copied().collect();
                        let live: Vec<u32> = (0..ctx.context_len).filter(|p| !gone.contains(p)).collect();
                        let excess = live.len().saturating_sub(budget as usize);
                        let mut rng = head_rng(seed ^ ((req as u64) << 32), layer, h);
                        let mut v: Vec<u32> = sample(&mut rng, live.len(), excess)
                            .into_iter()
                            .map(|i| live[i])
                            .collect();
                        v.sort_unstable();
                        v
                    }
                    Policy::Quant { .. } => Vec::new(),
                })
                .collect();
            out.push(per_head);
        }
        Ok(out)
    }
}

fn head_rng(seed: u64, layer: usize, head: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 32) | head as u64);
    rng
}

/// Oldest non-sink live positions to drop so that at most `budget` remain.
fn window_drops(context: u32, already: &[u32], sink: u32, budget: u32) -> Vec<u32> {
    let gone: BTreeSet<u32> = already.iter().copied().collect();
    let live = context as usize - gone.len();
    let mut excess = live.saturating_sub(budget as usize);
    let mut out = Vec::with_capacity(excess);
    for p in sink.min(context)..context {
        if excess == 0 {
            break;
        }
        if !gone.contains(&p) {
            out.push(p);
            excess -= 1;
        }
    }
    out
}

fn check_offsets(offsets: &[Range<usize>], requests: usize) -> Result<(), CompressorError> {
    if offsets.len() != requests {
        return Err(CompressorError::Offsets(format!(
            "{} ranges for {requests} requests",
            offsets.len()
        )));
    }
    let mut next = 0;
    for r in offsets {
        if r.start != next || r.end < r.start {
            return Err(CompressorError::Offsets(format!("range {r:?} does not start at {next}")));
        }
        next = r.end;
    }
    Ok(())
}
