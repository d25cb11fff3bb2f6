use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{rank_beam, Continuation, DecodeState, Policy, PolicyConfig, PolicyError};
use crate::fragmenter::{clip_continuation, BoundarySet};

/// Connection settings for an HTTP completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Full URL of the completions route.
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_key: None,
            model: None,
            timeout_ms: 30_000,
            max_in_flight: 8,
            max_attempts: 3,
            backoff_base_ms: 250,
        }
    }
}

impl RemoteConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(PolicyError::InvalidConfig(format!(
                "endpoint {:?} is not an http(s) URL",
                self.endpoint
            )));
        }
        if self.max_in_flight == 0 || self.max_attempts == 0 || self.timeout_ms == 0 {
            return Err(PolicyError::InvalidConfig(
                "max_in_flight, max_attempts and timeout_ms must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    n: usize,
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    stop: &'a [&'a str],
    logprobs: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    echo: bool,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize, Default)]
struct ChoiceLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

/// Servers occasionally round a certain token to a tiny positive value.
const POSITIVE_SLACK: f64 = 1e-6;

fn sanitize(lp: f64) -> Result<f64, PolicyError> {
    if !lp.is_finite() {
        Err(PolicyError::NonFiniteLogprob(lp))
    } else if lp > POSITIVE_SLACK {
        Err(PolicyError::PositiveLogprob(lp))
    } else {
        Ok(lp.min(0.0))
    }
}

/// Per-token log-probabilities of tokens whose first non-whitespace byte
/// lies in `[lo, hi)`, offsets measured from the start of the concatenated
/// token texts.
fn logprobs_in_span(lp: &ChoiceLogprobs, lo: usize, hi: usize) -> Result<Vec<f64>, PolicyError> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (tok, value) in lp.tokens.iter().zip(&lp.token_logprobs) {
        let lead = tok.len() - tok.trim_start().len();
        let start = offset + lead.min(tok.len().saturating_sub(1));
        offset += tok.len();
        if start >= lo && start < hi {
            out.push(sanitize(value.unwrap_or(0.0))?);
        }
    }
    Ok(out)
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Policy served by an OpenAI-style `/completions` endpoint.
///
/// Beams are emulated by sampling `beam_width` completions and
/// de-duplicating the clipped fragments; greedy decoding asks for one
/// completion at temperature 0. Whole-query scoring uses `echo` with
/// `max_tokens = 0`.
pub struct RemotePolicy {
    config: RemoteConfig,
    agent: ureq::Agent,
    gate: Gate,
    boundaries: BoundarySet,
}

impl RemotePolicy {
    pub fn new(config: RemoteConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            agent,
            boundaries: BoundarySet::default(),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post_once(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse, String> {
        let _permit = self.gate.acquire();
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        resp.body_mut()
            .read_json::<CompletionResponse>()
            .map_err(|e| format!("malformed response: {e}"))
    }

    fn post(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse, PolicyError> {
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                let wait = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.post_once(body) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("completion request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(PolicyError::Unavailable(format!(
            "{} after {} attempts: {last}",
            self.config.endpoint, self.config.max_attempts
        )))
    }

    fn sample(&self, state: &DecodeState<'_>, config: &PolicyConfig, n: usize, temperature: f64) -> Result<Vec<Continuation>, PolicyError> {
        if state.is_empty() {
            return Err(PolicyError::EmptyState);
        }
        let prompt = state.text();
        let body = CompletionRequest {
            model: self.config.model.as_deref(),
            prompt: &prompt,
            n,
            max_tokens: config.max_fragment_tokens,
            temperature,
            stop: &[],
            logprobs: 1,
            echo: false,
        };
        let resp = self.post(&body)?;
        let mut out = Vec::with_capacity(resp.choices.len());
        for choice in resp.choices {
            let clip = clip_continuation(&choice.text, &self.boundaries);
            if clip.fragment.trim().is_empty() {
                continue;
            }
            let whole = clip.fragment.len() == choice.text.len();
            let ends = clip.ends_sequence || (whole && choice.finish_reason.as_deref() == Some("stop"));
            let lps = logprobs_in_span(&choice.logprobs.unwrap_or_default(), 0, clip.fragment.len())?;
            out.push(Continuation::new(clip.fragment, lps, ends)?);
        }
        let beam = rank_beam(out, config.beam_width);
        if beam.is_empty() {
            return Err(PolicyError::EmptyBeam);
        }
        Ok(beam)
    }
}

impl Policy for RemotePolicy {
    fn beam_continuations(&self, state: &DecodeState<'_>, config: &PolicyConfig) -> Result<Vec<Continuation>, PolicyError> {
        self.sample(state, config, config.beam_width, config.decode_temperature)
    }

    fn greedy_continuation(&self, state: &DecodeState<'_>, config: &PolicyConfig) -> Result<Continuation, PolicyError> {
        self.sample(state, config, 1, 0.0)?
            .into_iter()
            .next()
            .ok_or(PolicyError::EmptyBeam)
    }

    fn sequence_logprob(&self, context: &str, full_sql: &str) -> Result<f64, PolicyError> {
        if full_sql.is_empty() {
            return Err(PolicyError::UnscorableSequence("empty SQL".into()));
        }
        let prompt = format!("{context}{full_sql}");
        let body = CompletionRequest {
            model: self.config.model.as_deref(),
            prompt: &prompt,
            n: 1,
            max_tokens: 0,
            temperature: 0.0,
            stop: &[],
            logprobs: 1,
            echo: true,
        };
        let resp = self.post(&body)?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| PolicyError::UnscorableSequence("response carries no logprobs".into()))?;
        let values = logprobs_in_span(&lp, context.len(), prompt.len())?;
        if values.is_empty() {
            return Err(PolicyError::UnscorableSequence("no scored tokens inside the SQL span".into()));
        }
        Ok(values.iter().sum::<f64>().min(0.0))
    }
}
