use std::collections::BTreeSet;

use super::tree::{NodeId, SearchTree};
use super::{SearchConfig, SearchError};
use crate::fragmenter::{clip_continuation, is_complete_sql, tokenize_lenient, BoundarySet, TokenKind};
use crate::policy::{self_reward, DecodeState, Policy, PolicyError};
use crate::pruning;

/// Token set used for near-duplicate detection: punctuation is ignored and
/// everything except literals is lower-cased.
pub fn fragment_token_set(fragment: &str) -> BTreeSet<String> {
    tokenize_lenient(fragment)
        .iter()
        .filter(|t| t.kind != TokenKind::Punctuation)
        .map(|t| match t.kind {
            TokenKind::Literal => t.text.to_string(),
            _ => t.text.to_ascii_lowercase(),
        })
        .collect()
}

/// Jaccard similarity of two token sets; two empty sets are identical.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// A scored, clipped candidate fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub fragment: String,
    pub logprob: f64,
    pub reward: f64,
    pub ends_sequence: bool,
}

/// Counters for one expansion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExpansionStats {
    /// Candidates that reached the pruning filter.
    pub candidates: usize,
    pub pruned: usize,
}

/// Drops any candidate too similar to a better-scoring one already kept.
/// Input order must be best first.
pub fn dedupe_similar(cands: Vec<Candidate>, threshold: f64) -> Vec<Candidate> {
    let mut kept: Vec<(Candidate, BTreeSet<String>)> = Vec::with_capacity(cands.len());
    for c in cands {
        let set = fragment_token_set(&c.fragment);
        if kept.iter().all(|(k, ks)| k.fragment != c.fragment && jaccard(ks, &set) < threshold) {
            kept.push((c, set));
        }
    }
    kept.into_iter().map(|(c, _)| c).collect()
}

/// Beam, clip, de-duplicate, score, prune and keep the best `top_d` as new
/// children of `leaf`. An empty beam marks the node: terminal if its SQL is
/// already complete, a dead end otherwise.
pub(crate) fn expand(
    tree: &mut SearchTree,
    leaf: NodeId,
    policy: &dyn Policy,
    boundaries: &BoundarySet,
    config: &SearchConfig,
) -> Result<(Vec<NodeId>, ExpansionStats), SearchError> {
    let state_sql = tree.node(leaf).sql.clone();
    let depth = tree.node(leaf).depth;
    let beam = match policy.beam_continuations(&DecodeState::new(tree.context(), &state_sql), &config.policy) {
        Ok(b) => b,
        Err(PolicyError::EmptyBeam) => Vec::new(),
        Err(e) => return Err(e.into()),
    };

    let mut cands = Vec::with_capacity(beam.len());
    for c in beam {
        let clip = clip_continuation(&c.text, boundaries);
        if clip.fragment.trim().is_empty() {
            continue;
        }
        let ends = clip.ends_sequence || (c.ends_sequence && clip.fragment == c.text);
        cands.push(Candidate {
            reward: self_reward(c.total_logprob, &config.policy)?,
            fragment: clip.fragment,
            logprob: c.total_logprob,
            ends_sequence: ends,
        });
    }
    cands.sort_by(|a, b| b.reward.total_cmp(&a.reward));
    let cands = dedupe_similar(cands, config.similarity_threshold);

    if cands.is_empty() {
        let node = tree.node_mut(leaf);
        node.is_terminal = true;
        node.dead_end = !is_complete_sql(&state_sql);
        return Ok((Vec::new(), ExpansionStats::default()));
    }

    let considered = cands.len();
    let scored = cands.into_iter().map(|c| {
        let r = c.reward;
        (c, r)
    });
    let survivors = pruning::filter(scored.collect(), depth + 1, &config.pruning)?;
    let stats = ExpansionStats {
        candidates: considered,
        pruned: considered - survivors.len(),
    };

    // survivors keep the best-first order
    let ids = survivors
        .into_iter()
        .take(config.top_d)
        .map(|(c, _)| tree.add_child(leaf, &c.fragment, c.logprob, c.reward, c.ends_sequence))
        .collect();
    Ok((ids, stats))
}
