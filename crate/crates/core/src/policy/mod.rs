//! The generative policy: beam proposals with log-probabilities, sequence
//! scoring and the log-likelihood self-reward.
//!
//! All log-probabilities are natural logs.

mod remote;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{RemoteConfig, RemotePolicy};
pub use scripted::{ScriptEntry, ScriptedPolicy};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy unavailable: {0}")]
    Unavailable(String),
    #[error("policy returned no continuation")]
    EmptyBeam,
    #[error("sequence cannot be scored: {0}")]
    UnscorableSequence(String),
    #[error("log-probability {0} is not finite")]
    NonFiniteLogprob(f64),
    #[error("log-probability {0} is positive")]
    PositiveLogprob(f64),
    #[error("decode state is empty")]
    EmptyState,
    #[error("invalid policy script: {0}")]
    InvalidScript(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
}

/// What the policy conditions on: the serialized prompt context followed by
/// the SQL generated so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeState<'a> {
    pub context: &'a str,
    pub sql: &'a str,
}

impl<'a> DecodeState<'a> {
    pub fn new(context: &'a str, sql: &'a str) -> Self {
        Self { context, sql }
    }

    pub fn text(&self) -> String {
        format!("{}{}", self.context, self.sql)
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty() && self.sql.is_empty()
    }
}

/// One proposed fragment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub total_logprob: f64,
    pub ends_sequence: bool,
}

impl Continuation {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>, ends_sequence: bool) -> Result<Self, PolicyError> {
        for &lp in &token_logprobs {
            check_logprob(lp)?;
        }
        let total_logprob = token_logprobs.iter().sum::<f64>().min(0.0);
        Ok(Self {
            text: text.into(),
            token_logprobs,
            total_logprob,
            ends_sequence,
        })
    }
}

fn check_logprob(lp: f64) -> Result<(), PolicyError> {
    if !lp.is_finite() {
        Err(PolicyError::NonFiniteLogprob(lp))
    } else if lp > 0.0 {
        Err(PolicyError::PositiveLogprob(lp))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Reward temperature.
    pub alpha: f64,
    /// Full score awarded to a certain (log-probability 0) output.
    pub beta: f64,
    pub beam_width: usize,
    pub max_fragment_tokens: usize,
    pub decode_temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 100.0,
            beam_width: 5,
            max_fragment_tokens: 64,
            decode_temperature: 0.6,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1");
        }
        if self.max_fragment_tokens == 0 {
            return bad("max_fragment_tokens must be at least 1");
        }
        if !(self.decode_temperature >= 0.0 && self.decode_temperature.is_finite()) {
            return bad("decode_temperature must be non-negative");
        }
        Ok(())
    }
}

/// `beta + alpha * total_logprob`.
pub fn self_reward(total_logprob: f64, config: &PolicyConfig) -> Result<f64, PolicyError> {
    check_logprob(total_logprob)?;
    Ok(config.beta + config.alpha * total_logprob)
}

/// A generative policy. Implementations must be safe to call from several
/// worker threads at once.
pub trait Policy: Send + Sync {
    /// Up to `config.beam_width` distinct continuations, best first.
    fn beam_continuations(&self, state: &DecodeState<'_>, config: &PolicyConfig) -> Result<Vec<Continuation>, PolicyError>;

    /// The single most likely continuation.
    fn greedy_continuation(&self, state: &DecodeState<'_>, config: &PolicyConfig) -> Result<Continuation, PolicyError> {
        self.beam_continuations(state, config)?
            .into_iter()
            .next()
            .ok_or(PolicyError::EmptyBeam)
    }

    /// Total log-probability of `full_sql` following `context`.
    fn sequence_logprob(&self, context: &str, full_sql: &str) -> Result<f64, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for std::sync::Arc<P> {
    fn beam_continuations(&self, state: &DecodeState<'_>, config: &PolicyConfig) -> Result<Vec<Continuation>, PolicyError> {
        (**self).beam_continuations(state, config)
    }

    fn greedy_continuation(&self, state: &DecodeState<'_>, config: &PolicyConfig) -> Result<Continuation, PolicyError> {
        (**self).greedy_continuation(state, config)
    }

    fn sequence_logprob(&self, context: &str, full_sql: &str) -> Result<f64, PolicyError> {
        (**self).sequence_logprob(context, full_sql)
    }
}

/// Stable sort by total log-probability, drop repeated texts (the better
/// copy survives), keep the first `width`.
pub(crate) fn rank_beam(mut cands: Vec<Continuation>, width: usize) -> Vec<Continuation> {
    cands.sort_by(|a, b| b.total_logprob.total_cmp(&a.total_logprob));
    let mut out: Vec<Continuation> = Vec::with_capacity(width.min(cands.len()));
    for c in cands {
        if out.len() == width {
            break;
        }
        if !out.iter().any(|o| o.text == c.text) {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PolicyConfig {
        PolicyConfig::default()
    }

    #[test]
    fn self_reward_examples() {
        assert_eq!(self_reward(0.0, &cfg()).unwrap(), 100.0);
        assert_eq!(self_reward(-10.0, &cfg()).unwrap(), 94.0);
        // 100 + 0.6 * ln(0.5) = 100 - 0.415888308335967...
        let r = self_reward(0.5f64.ln(), &cfg()).unwrap();
        assert!((r - 99.584_111_691_664_03).abs() < 1e-6);
    }

    #[test]
    fn self_reward_rejects_bad_input() {
        assert!(matches!(self_reward(f64::NAN, &cfg()), Err(PolicyError::NonFiniteLogprob(_))));
        assert!(matches!(self_reward(f64::NEG_INFINITY, &cfg()), Err(PolicyError::NonFiniteLogprob(_))));
        assert!(matches!(self_reward(0.1, &cfg()), Err(PolicyError::PositiveLogprob(_))));
    }

    #[test]
    fn continuation_total_is_sum() {
        let c = Continuation::new("x", vec![-0.5, -0.25], false).unwrap();
        assert_eq!(c.total_logprob, -0.75);
        assert!(Continuation::new("x", vec![0.2], false).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        for broken in [
            PolicyConfig { alpha: 0.0, ..cfg() },
            PolicyConfig { beta: -1.0, ..cfg() },
            PolicyConfig { beam_width: 0, ..cfg() },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn rank_beam_is_stable_and_unique() {
        let mk = |t: &str, lp: f64| Continuation::new(t, vec![lp], false).unwrap();
        let out = rank_beam(vec![mk("a", -1.0), mk("b", -0.5), mk("c", -1.0), mk("b", -0.7)], 5);
        let texts: Vec<_> = out.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["b", "a", "c"]);
        assert_eq!(rank_beam(out, 2).len(), 2);
    }
}
