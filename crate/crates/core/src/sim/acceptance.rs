use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{expected_gamma, AcceptanceDraws, AcceptanceModel, ConfigError};

/// Realizes tokens per verify round from an acceptance model.
///
/// `Sampled` draws the accepted prefix length as a run of per-token Bernoulli
/// successes (a geometric run truncated at the draft length) and adds the
/// verifier's bonus or correction token. `DeterministicMean` returns the
/// expectation `γ(x,c)·x + 1` instead.
#[derive(Debug, Clone)]
pub struct AcceptanceSampler {
    model: AcceptanceModel,
    draws: AcceptanceDraws,
    rng: ChaCha8Rng,
    probs: BTreeMap<(u32, u64), f64>,
}

impl AcceptanceSampler {
    pub fn new(model: AcceptanceModel, draws: AcceptanceDraws, seed: u64) -> Self {
        Self {
            model,
            draws,
            rng: ChaCha8Rng::seed_from_u64(seed),
            probs: BTreeMap::new(),
        }
    }

    /// Accepted draft tokens (excluding the bonus) for one round.
    pub fn accepted(&mut self, drafted: u32, c: f64) -> Result<f64, ConfigError> {
        if drafted == 0 {
            return Ok(0.0);
        }
        match self.draws {
            AcceptanceDraws::DeterministicMean => Ok(expected_gamma(&self.model, drafted, c)? * drafted as f64),
            AcceptanceDraws::Sampled => {
                let key = (drafted, c.to_bits());
                let p = match self.probs.get(&key) {
                    Some(p) => *p,
                    None => {
                        let p = self.model.per_token_prob(drafted, c)?;
                        self.probs.insert(key, p);
                        p
                    }
                };
                let mut a = 0;
                while a < drafted && self.rng.gen::<f64>() < p {
                    a += 1;
                }
                Ok(a as f64)
            }
        }
    }

    /// Tokens emitted by a verify round, capped at what the request still owes.
    pub fn round_tokens(&mut self, drafted: u32, c: f64, owed: f64) -> Result<f64, ConfigError> {
        Ok((self.accepted(drafted, c)? + 1.0).min(owed))
    }
}
