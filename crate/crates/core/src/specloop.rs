//! Greedy draft → verify → accept over abstract token oracles, plus exact
//! sequence-level KL divergence for small autoregressive models.
//!
//! Tokens are opaque small integers over a finite vocabulary. An oracle maps a
//! prefix to the next token deterministically; the drafter stands in for the
//! model running on a compressed KV cache and the verifier for the same model
//! on the full cache.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

pub type Token = u32;

/// Largest `vocab^T` the enumeration routines will walk.
pub const ENUMERATION_GUARD: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("predictions must have length drafted + 1 (drafted {drafted}, predictions {predictions})")]
    LengthMismatch { drafted: usize, predictions: usize },
    #[error("drafted sequence is empty")]
    EmptyDraft,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KlError {
    #[error("vocab^T = {vocab}^{horizon} exceeds the enumeration guard of {ENUMERATION_GUARD}")]
    GuardExceeded { vocab: usize, horizon: usize },
    #[error("models disagree on vocabulary size ({0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error("horizon {requested} exceeds model horizon {available}")]
    Horizon { requested: usize, available: usize },
    #[error("conditional at prefix {prefix:?} does not sum to 1 (sum = {sum})")]
    NotNormalized { prefix: Vec<Token>, sum: f64 },
    #[error("vocab_size must be >= 2")]
    TinyVocab,
}

/// Deterministic next-token function, optionally exposing its distribution.
pub trait TokenOracle {
    fn next_token(&self, prefix: &[Token]) -> Token;

    fn distribution(&self, _prefix: &[Token]) -> Option<Vec<f64>> {
        None
    }
}

impl<T: TokenOracle + ?Sized> TokenOracle for &T {
    fn next_token(&self, prefix: &[Token]) -> Token {
        (**self).next_token(prefix)
    }
    fn distribution(&self, prefix: &[Token]) -> Option<Vec<f64>> {
        (**self).distribution(prefix)
    }
}

/// Always emits the same token.
#[derive(Debug, Clone, Copy)]
pub struct ConstantOracle(pub Token);

impl TokenOracle for ConstantOracle {
    fn next_token(&self, _prefix: &[Token]) -> Token {
        self.0
    }
}

/// Repeats the last token of the prefix (or `empty` for an empty prefix).
#[derive(Debug, Clone, Copy)]
pub struct EchoLastOracle {
    pub empty: Token,
}

impl TokenOracle for EchoLastOracle {
    fn next_token(&self, prefix: &[Token]) -> Token {
        prefix.last().copied().unwrap_or(self.empty)
    }
}

/// Next token looked up from the last `context` tokens; unknown keys fall back.
#[derive(Debug, Clone)]
pub struct TableOracle {
    pub context: usize,
    pub table: HashMap<Vec<Token>, Token>,
    pub fallback: Token,
}

impl TokenOracle for TableOracle {
    fn next_token(&self, prefix: &[Token]) -> Token {
        let start = prefix.len().saturating_sub(self.context);
        self.table.get(&prefix[start..]).copied().unwrap_or(self.fallback)
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 finalizer over the running state
    h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

fn hash_prefix(seed: u64, prefix: &[Token]) -> u64 {
    let mut h = mix(seed, prefix.len() as u64);
    for &t in prefix {
        h = mix(h, t as u64);
    }
    h
}

/// Pseudo-random but fully deterministic function of the whole prefix.
#[derive(Debug, Clone, Copy)]
pub struct HashOracle {
    pub vocab: u32,
    pub seed: u64,
}

impl TokenOracle for HashOracle {
    fn next_token(&self, prefix: &[Token]) -> Token {
        (hash_prefix(self.seed, prefix) % self.vocab as u64) as Token
    }
}

/// Follows `base` except on a deterministic pseudo-random subset of prefixes
/// (density `disagree`), where it emits a different token.
#[derive(Debug, Clone, Copy)]
pub struct PerturbedOracle<O> {
    pub base: O,
    pub vocab: u32,
    pub seed: u64,
    pub disagree: f64,
}

impl<O: TokenOracle> TokenOracle for PerturbedOracle<O> {
    fn next_token(&self, prefix: &[Token]) -> Token {
        let t = self.base.next_token(prefix);
        let h = hash_prefix(self.seed, prefix);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if self.vocab > 1 && u < self.disagree {
            let shift = 1 + (h % (self.vocab as u64 - 1)) as Token;
            (t + shift) % self.vocab
        } else {
            t
        }
    }
}

/// Outcome of one speculative round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecRoundResult {
    pub drafted: Vec<Token>,
    pub predictions: Vec<Token>,
    pub accepted: Vec<Token>,
    pub bonus_used: bool,
    /// 1-based position of the first disagreement.
    pub first_mismatch: Option<usize>,
}

/// Autoregressively drafts `x` tokens after `prefix`.
pub fn draft<O: TokenOracle>(drafter: &O, prefix: &[Token], x: usize) -> Vec<Token> {
    let mut ctx = prefix.to_vec();
    let mut out = Vec::with_capacity(x);
    for _ in 0..x {
        let t = drafter.next_token(&ctx);
        ctx.push(t);
        out.push(t);
    }
    out
}

/// Verifier predictions at every drafted position plus the bonus position.
pub fn verify<O: TokenOracle>(verifier: &O, prefix: &[Token], drafted: &[Token]) -> Vec<Token> {
    let mut ctx = prefix.to_vec();
    let mut out = Vec::with_capacity(drafted.len() + 1);
    out.push(verifier.next_token(&ctx));
    for &t in drafted {
        ctx.push(t);
        out.push(verifier.next_token(&ctx));
    }
    out
}

/// Greedy acceptance: keep the agreeing prefix plus the verifier's correction,
/// or every drafted token plus the bonus prediction.
pub fn accept(drafted: &[Token], predictions: &[Token]) -> Result<SpecRoundResult, SpecError> {
    if drafted.is_empty() {
        return Err(SpecError::EmptyDraft);
    }
    if predictions.len() != drafted.len() + 1 {
        return Err(SpecError::LengthMismatch {
            drafted: drafted.len(),
            predictions: predictions.len(),
        });
    }
    let mismatch = drafted.iter().zip(predictions).position(|(d, p)| d != p);
    let (accepted, bonus_used) = match mismatch {
        Some(j) => {
            let mut acc = drafted[..j].to_vec();
            acc.push(predictions[j]);
            (acc, false)
        }
        None => {
            let mut acc = drafted.to_vec();
            acc.push(predictions[drafted.len()]);
            (acc, true)
        }
    };
    Ok(SpecRoundResult {
        drafted: drafted.to_vec(),
        predictions: predictions.to_vec(),
        accepted,
        bonus_used,
        first_mismatch: mismatch.map(|j| j + 1),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecRun {
    pub output: Vec<Token>,
    /// `|accepted|` for every round, before truncation to `K`.
    pub accepted_lengths: Vec<usize>,
}

/// Runs speculative decoding until `k` tokens are produced; the last round's
/// surplus is discarded.
pub fn run_speculative<D: TokenOracle, V: TokenOracle>(
    drafter: &D,
    verifier: &V,
    prompt: &[Token],
    k: usize,
    x: usize,
) -> SpecRun {
    assert!(k >= 1 && x >= 1, "k and x must be >= 1");
    let mut ctx = prompt.to_vec();
    let mut accepted_lengths = Vec::new();
    while ctx.len() - prompt.len() < k {
        let drafted = draft(drafter, &ctx, x);
        let predictions = verify(verifier, &ctx, &drafted);
        let round = accept(&drafted, &predictions).expect("verify returns x + 1 predictions");
        accepted_lengths.push(round.accepted.len());
        ctx.extend_from_slice(&round.accepted);
    }
    ctx.truncate(prompt.len() + k);
    SpecRun {
        output: ctx.split_off(prompt.len()),
        accepted_lengths,
    }
}

/// Plain greedy decoding with the verifier alone.
pub fn run_autoregressive<V: TokenOracle>(verifier: &V, prompt: &[Token], k: usize) -> Vec<Token> {
    draft(verifier, prompt, k)
}

/// KL divergence that may be infinite when the support condition fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlValue {
    Finite(f64),
    /// `q = 0` somewhere `p > 0`.
    Infinite,
}

impl KlValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            KlValue::Finite(v) => Some(v),
            KlValue::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, KlValue::Infinite)
    }
}

/// `Σ p log(p/q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> KlValue {
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return KlValue::Infinite;
            }
            sum += pi * (pi / qi).ln();
        }
    }
    KlValue::Finite(sum)
}

/// Autoregressive model over a finite vocabulary with explicit conditionals
/// for every prefix shorter than `horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAutoregressiveModel {
    vocab: usize,
    horizon: usize,
    // level t holds vocab^t conditionals, prefix encoded base-vocab
    levels: Vec<Vec<Vec<f64>>>,
}

fn check_guard(vocab: usize, horizon: usize) -> Result<(), KlError> {
    match (vocab as u64).checked_pow(horizon as u32) {
        Some(n) if n <= ENUMERATION_GUARD => Ok(()),
        _ => Err(KlError::GuardExceeded { vocab, horizon }),
    }
}

fn prefix_index(vocab: usize, prefix: &[Token]) -> usize {
    prefix.iter().fold(0, |acc, &t| acc * vocab + t as usize)
}

fn decode_prefix(vocab: usize, len: usize, mut idx: usize) -> Vec<Token> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = (idx % vocab) as Token;
        idx /= vocab;
    }
    out
}

impl ToyAutoregressiveModel {
    /// Builds a model from a conditional function; every vector must sum to 1
    /// within 1e-12.
    pub fn from_fn<F>(vocab: usize, horizon: usize, mut f: F) -> Result<Self, KlError>
    where
        F: FnMut(&[Token]) -> Vec<f64>,
    {
        if vocab < 2 {
            return Err(KlError::TinyVocab);
        }
        check_guard(vocab, horizon)?;
        let mut levels = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let n = vocab.pow(t as u32);
            let mut level = Vec::with_capacity(n);
            for idx in 0..n {
                let prefix = decode_prefix(vocab, t, idx);
                let dist = f(&prefix);
                let sum: f64 = dist.iter().sum();
                if dist.len() != vocab || (sum - 1.0).abs() > 1e-12 || dist.iter().any(|&p| p < 0.0) {
                    return Err(KlError::NotNormalized { prefix, sum });
                }
                level.push(dist);
            }
            levels.push(level);
        }
        Ok(Self { vocab, horizon, levels })
    }

    /// Random model with every probability bounded away from zero.
    pub fn random<R: Rng>(vocab: usize, horizon: usize, rng: &mut R) -> Result<Self, KlError> {
        Self::from_fn(vocab, horizon, |_| {
            let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
            normalize(raw)
        })
    }

    /// Tilts every conditional by `exp(strength · z)` with fresh random `z`
    /// per prefix; `strength = 0` reproduces `self`.
    pub fn perturbed<R: Rng>(&self, strength: f64, rng: &mut R) -> Self {
        let levels = self
            .levels
            .iter()
            .map(|level| {
                level
                    .iter()
                    .map(|dist| {
                        if strength == 0.0 {
                            return dist.clone();
                        }
                        let tilted = dist
                            .iter()
                            .map(|&p| p * (strength * rng.gen_range(-1.0..1.0)).exp())
                            .collect();
                        normalize(tilted)
                    })
                    .collect()
            })
            .collect();
        Self {
            vocab: self.vocab,
            horizon: self.horizon,
            levels,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `p(· | prefix)`; `None` when the prefix is at or past the horizon.
    pub fn conditional(&self, prefix: &[Token]) -> Option<&[f64]> {
        let level = self.levels.get(prefix.len())?;
        if prefix.iter().any(|&t| t as usize >= self.vocab) {
            return None;
        }
        Some(&level[prefix_index(self.vocab, prefix)])
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|p| *p /= s);
    // push the rounding residue onto the largest entry so the sum is 1 to ~1 ulp
    let resid = 1.0 - v.iter().sum::<f64>();
    if let Some(max) = v.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *max += resid;
    }
    v
}

impl TokenOracle for ToyAutoregressiveModel {
    /// Greedy argmax; ties go to the smaller token.
    fn next_token(&self, prefix: &[Token]) -> Token {
        let dist = self.conditional(prefix).expect("prefix within model horizon");
        let mut best = 0;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        best as Token
    }

    fn distribution(&self, prefix: &[Token]) -> Option<Vec<f64>> {
        self.conditional(prefix).map(<[f64]>::to_vec)
    }
}

fn check_pair(
    full: &ToyAutoregressiveModel,
    lossy: &ToyAutoregressiveModel,
    horizon: usize,
) -> Result<(), KlError> {
    if full.vocab != lossy.vocab {
        return Err(KlError::VocabMismatch(full.vocab, lossy.vocab));
    }
    let available = full.horizon.min(lossy.horizon);
    if horizon > available {
        return Err(KlError::Horizon { requested: horizon, available });
    }
    check_guard(full.vocab, horizon)
}

/// Per-step KL between the two next-token distributions after `prefix`.
pub fn per_step_kl(
    full: &ToyAutoregressiveModel,
    lossy: &ToyAutoregressiveModel,
    prefix: &[Token],
) -> Result<KlValue, KlError> {
    check_pair(full, lossy, 0)?;
    let requested = prefix.len() + 1;
    let horizon_err = KlError::Horizon {
        requested,
        available: full.horizon.min(lossy.horizon),
    };
    let p = full.conditional(prefix).ok_or_else(|| horizon_err.clone())?;
    let q = lossy.conditional(prefix).ok_or(horizon_err)?;
    Ok(kl_divergence(p, q))
}

/// Sequence-level KL over length-`horizon` sequences, computed from the joint
/// distributions by enumerating every sequence.
pub fn sequence_kl_direct(
    full: &ToyAutoregressiveModel,
    lossy: &ToyAutoregressiveModel,
    horizon: usize,
) -> Result<KlValue, KlError> {
    check_pair(full, lossy, horizon)?;
    let n = full.vocab.pow(horizon as u32);
    let mut seq = vec![0 as Token; horizon];
    let mut sum = 0.0;
    for idx in 0..n {
        let mut rem = idx;
        for slot in seq.iter_mut().rev() {
            *slot = (rem % full.vocab) as Token;
            rem /= full.vocab;
        }
        let mut p_full = 1.0;
        let mut log_ratio = 0.0;
        let mut infinite = false;
        for t in 0..horizon {
            let tok = seq[t] as usize;
            let pf = full.conditional(&seq[..t]).expect("within horizon")[tok];
            let pl = lossy.conditional(&seq[..t]).expect("within horizon")[tok];
            p_full *= pf;
            if pf > 0.0 {
                if pl <= 0.0 {
                    infinite = true;
                } else {
                    log_ratio += pf.ln() - pl.ln();
                }
            }
        }
        if p_full > 0.0 {
            if infinite {
                return Ok(KlValue::Infinite);
            }
            sum += p_full * log_ratio;
        }
    }
    Ok(KlValue::Finite(sum))
}

/// Chain-rule route: `Σ_t E_{prefix ~ p_full}[KL_t(prefix)]`, returned per
/// step as a running total (entry `t-1` is `KL_{1:t}`).
pub fn cumulative_kl_chain(
    full: &ToyAutoregressiveModel,
    lossy: &ToyAutoregressiveModel,
    horizon: usize,
) -> Result<Vec<KlValue>, KlError> {
    check_pair(full, lossy, horizon)?;
    let v = full.vocab;
    let mut out = Vec::with_capacity(horizon);
    let mut prefix_prob = vec![1.0_f64];
    let mut total = 0.0;
    let mut infinite = false;
    for t in 0..horizon {
        let mut step = 0.0;
        let mut next_prob = vec![0.0; prefix_prob.len() * v];
        for (idx, &w) in prefix_prob.iter().enumerate() {
            let p = &full.levels[t][idx];
            let q = &lossy.levels[t][idx];
            if w > 0.0 {
                match kl_divergence(p, q) {
                    KlValue::Finite(k) => step += w * k,
                    KlValue::Infinite => infinite = true,
                }
            }
            for (tok, &pt) in p.iter().enumerate() {
                next_prob[idx * v + tok] = w * pt;
            }
        }
        total += step;
        out.push(if infinite { KlValue::Infinite } else { KlValue::Finite(total) });
        prefix_prob = next_prob;
    }
    Ok(out)
}

/// Chain-rule route for `KL_{1:horizon}`.
pub fn sequence_kl_chain(
    full: &ToyAutoregressiveModel,
    lossy: &ToyAutoregressiveModel,
    horizon: usize,
) -> Result<KlValue, KlError> {
    check_pair(full, lossy, horizon)?;
    if horizon == 0 {
        return Ok(KlValue::Finite(0.0));
    }
    Ok(*cumulative_kl_chain(full, lossy, horizon)?.last().expect("horizon >= 1"))
}

/// Smallest per-step KL over every prefix shorter than `horizon`.
pub fn min_per_step_kl(
    full: &ToyAutoregressiveModel,
    lossy: &ToyAutoregressiveModel,
    horizon: usize,
) -> Result<f64, KlError> {
    check_pair(full, lossy, horizon)?;
    let mut min = f64::INFINITY;
    for t in 0..horizon {
        for (p, q) in full.levels[t].iter().zip(&lossy.levels[t]) {
            if let KlValue::Finite(k) = kl_divergence(p, q) {
                min = min.min(k);
            }
        }
    }
    Ok(min)
}
