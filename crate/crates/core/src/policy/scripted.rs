use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::{check_logprob, rank_beam, Continuation, DecodeState, Policy, PolicyConfig, PolicyError};

/// One scripted continuation of a partial SQL state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub ends_sequence: bool,
}

impl ScriptEntry {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        Self {
            text: text.into(),
            token_logprobs: vec![logprob],
            ends_sequence: false,
        }
    }

    pub fn ending(mut self) -> Self {
        self.ends_sequence = true;
        self
    }

    fn total(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

type Trie = HashMap<String, Vec<ScriptEntry>>;

#[derive(Debug, Clone)]
struct Scope {
    matcher: String,
    trie: Trie,
}

/// Deterministic stand-in for a model. Maps partial SQL (without the prompt
/// context) to an ordered list of continuations.
///
/// A policy holds one or more scopes. A scope applies when its `match`
/// string occurs in the prompt context; a scope with an empty `match`
/// applies to any context that no other scope claimed.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    scopes: Vec<Scope>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    text: String,
    logprob: Option<f64>,
    token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    end: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScope {
    #[serde(default, rename = "match")]
    matcher: String,
    trie: HashMap<String, Vec<RawEntry>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawScript {
    Scoped { scopes: Vec<RawScope> },
    Single { trie: HashMap<String, Vec<RawEntry>> },
}

fn convert(raw: HashMap<String, Vec<RawEntry>>) -> Result<Trie, PolicyError> {
    let mut trie = Trie::with_capacity(raw.len());
    for (state, entries) in raw {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let token_logprobs = match (e.logprob, e.token_logprobs) {
                (_, Some(t)) if !t.is_empty() => t,
                (Some(lp), _) => vec![lp],
                _ => {
                    return Err(PolicyError::InvalidScript(format!(
                        "entry {:?} under {state:?} has no log-probability",
                        e.text
                    )))
                }
            };
            for &lp in &token_logprobs {
                check_logprob(lp).map_err(|err| PolicyError::InvalidScript(format!("{:?}: {err}", e.text)))?;
            }
            out.push(ScriptEntry {
                text: e.text,
                token_logprobs,
                ends_sequence: e.end,
            });
        }
        trie.insert(state, out);
    }
    Ok(trie)
}

impl ScriptedPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `entries` under `state` in the default (context-independent) scope.
    pub fn with_state(self, state: &str, entries: Vec<ScriptEntry>) -> Self {
        self.with_scoped_state("", state, entries)
    }

    pub fn with_scoped_state(mut self, matcher: &str, state: &str, entries: Vec<ScriptEntry>) -> Self {
        let idx = match self.scopes.iter().position(|s| s.matcher == matcher) {
            Some(i) => i,
            None => {
                self.scopes.push(Scope {
                    matcher: matcher.to_string(),
                    trie: Trie::new(),
                });
                self.scopes.len() - 1
            }
        };
        self.scopes[idx].trie.entry(state.to_string()).or_default().extend(entries);
        self
    }

    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let raw: RawScript = serde_json::from_str(json).map_err(|e| PolicyError::InvalidScript(e.to_string()))?;
        let scopes = match raw {
            RawScript::Scoped { scopes } => scopes
                .into_iter()
                .map(|s| Ok(Scope { matcher: s.matcher, trie: convert(s.trie)? }))
                .collect::<Result<Vec<_>, PolicyError>>()?,
            RawScript::Single { trie } => vec![Scope {
                matcher: String::new(),
                trie: convert(trie)?,
            }],
        };
        Ok(Self { scopes })
    }

    pub fn from_file(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::InvalidScript(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn trie_for(&self, context: &str) -> Option<&Trie> {
        self.scopes
            .iter()
            .find(|s| !s.matcher.is_empty() && context.contains(&s.matcher))
            .or_else(|| self.scopes.iter().find(|s| s.matcher.is_empty()))
            .map(|s| &s.trie)
    }

    fn path_logprob(trie: &Trie, done: &str, rest: &str) -> Option<f64> {
        if rest.is_empty() {
            return Some(0.0);
        }
        let mut entries: Vec<&ScriptEntry> = trie
            .get(done)?
            .iter()
            .filter(|e| !e.text.is_empty() && rest.starts_with(&e.text))
            .collect();
        entries.sort_by_key(|e| std::cmp::Reverse(e.text.len()));
        entries.into_iter().find_map(|e| {
            let next = format!("{done}{}", e.text);
            Self::path_logprob(trie, &next, &rest[e.text.len()..]).map(|lp| lp + e.total())
        })
    }
}

impl Policy for ScriptedPolicy {
    fn beam_continuations(&self, state: &DecodeState<'_>, config: &PolicyConfig) -> Result<Vec<Continuation>, PolicyError> {
        if state.is_empty() {
            return Err(PolicyError::EmptyState);
        }
        let entries = self
            .trie_for(state.context)
            .and_then(|t| t.get(state.sql))
            .ok_or(PolicyError::EmptyBeam)?;
        let cands = entries
            .iter()
            .map(|e| Continuation::new(e.text.clone(), e.token_logprobs.clone(), e.ends_sequence))
            .collect::<Result<Vec<_>, _>>()?;
        let beam = rank_beam(cands, config.beam_width);
        if beam.is_empty() {
            return Err(PolicyError::EmptyBeam);
        }
        Ok(beam)
    }

    fn sequence_logprob(&self, context: &str, full_sql: &str) -> Result<f64, PolicyError> {
        if full_sql.is_empty() {
            return Err(PolicyError::UnscorableSequence("empty SQL".into()));
        }
        self.trie_for(context)
            .and_then(|t| Self::path_logprob(t, "", full_sql))
            .ok_or_else(|| PolicyError::UnscorableSequence(full_sql.to_string()))
    }
}
