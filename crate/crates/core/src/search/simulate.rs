use serde::{Deserialize, Serialize};

use super::tree::{NodeId, SearchTree};
use super::{SearchConfig, SearchError};
use crate::db::{ExecReward, ExecutionJudge};
use crate::fragmenter::{clip_continuation, is_complete_sql, BoundarySet};
use crate::policy::{self_reward, DecodeState, Policy, PolicyConfig, PolicyError};

/// The terms of one simulation's value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub process_reward: f64,
    pub global_reward: f64,
    pub exec_reward: ExecReward,
    pub blended_q: f64,
}

impl RewardBreakdown {
    /// `delta * process + (1 - delta) * (global + exec)`.
    pub fn blend(process_reward: f64, global_reward: f64, exec_reward: ExecReward, delta: f64) -> Self {
        let blended_q = delta * process_reward + (1.0 - delta) * (global_reward + f64::from(exec_reward.value()));
        Self {
            process_reward,
            global_reward,
            exec_reward,
            blended_q,
        }
    }
}

/// How a simulated continuation ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutEnd {
    /// Complete SQL, scored by execution.
    Complete,
    /// The policy had nothing more to say and the SQL is incomplete.
    DeadEnd,
    /// Depth limit reached on incomplete SQL.
    DepthLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Simulation {
    pub final_sql: String,
    /// Fragments appended beyond the starting node.
    pub simulated: Vec<String>,
    pub end: RolloutEnd,
    pub reward: RewardBreakdown,
}

/// Greedy continuation from a node.
pub(crate) struct Rollout {
    pub sql: String,
    pub fragments: Vec<String>,
    pub first_logprob: Option<f64>,
    pub logprob: f64,
    pub end: RolloutEnd,
}

/// Extends `sql` greedily until it is finished or `max_depth` fragments
/// deep. A `;` or end-of-sequence marker finishes the statement; complete
/// SQL also finishes when the policy has no continuation or the depth
/// limit is reached.
#[allow(clippy::too_many_arguments)]
pub(crate) fn greedy_rollout(
    policy: &dyn Policy,
    context: &str,
    start_sql: &str,
    start_depth: usize,
    already_finished: bool,
    boundaries: &BoundarySet,
    policy_config: &PolicyConfig,
    max_depth: usize,
) -> Result<Rollout, SearchError> {
    let mut r = Rollout {
        sql: start_sql.to_string(),
        fragments: Vec::new(),
        first_logprob: None,
        logprob: 0.0,
        end: RolloutEnd::Complete,
    };
    let mut depth = start_depth;
    let mut finished = already_finished;
    while !finished && depth < max_depth {
        let next = match policy.greedy_continuation(&DecodeState::new(context, &r.sql), policy_config) {
            Ok(c) => c,
            Err(PolicyError::EmptyBeam) => break,
            Err(e) => return Err(e.into()),
        };
        let clip = clip_continuation(&next.text, boundaries);
        if clip.fragment.trim().is_empty() {
            break;
        }
        finished = clip.ends_sequence || (next.ends_sequence && clip.fragment == next.text);
        r.sql.push_str(&clip.fragment);
        r.fragments.push(clip.fragment);
        r.first_logprob.get_or_insert(next.total_logprob);
        r.logprob += next.total_logprob;
        depth += 1;
    }
    r.end = if is_complete_sql(&r.sql) {
        RolloutEnd::Complete
    } else if finished || depth < max_depth {
        RolloutEnd::DeadEnd
    } else {
        RolloutEnd::DepthLimit
    };
    Ok(r)
}

/// Rolls out from `node` and scores the result.
pub(crate) fn simulate(
    tree: &SearchTree,
    node: NodeId,
    policy: &dyn Policy,
    judge: &ExecutionJudge<'_>,
    boundaries: &BoundarySet,
    config: &SearchConfig,
) -> Result<Simulation, SearchError> {
    let n = tree.node(node);
    let finished = n.is_terminal;
    let rollout = if n.dead_end {
        Rollout {
            sql: n.sql.clone(),
            fragments: Vec::new(),
            first_logprob: None,
            logprob: 0.0,
            end: RolloutEnd::DeadEnd,
        }
    } else {
        greedy_rollout(policy, tree.context(), &n.sql, n.depth, finished, boundaries, &config.policy, config.max_depth)?
    };

    let own = if node == SearchTree::ROOT { rollout.first_logprob.unwrap_or(0.0) } else { n.fragment_logprob };
    let process = self_reward(own, &config.policy)?;
    let accumulated = tree.path_logprob(node) + rollout.logprob;
    let seq_lp = if rollout.sql.is_empty() {
        accumulated
    } else {
        match policy.sequence_logprob(tree.context(), &rollout.sql) {
            Ok(lp) => lp,
            Err(PolicyError::UnscorableSequence(_)) => accumulated,
            Err(e) => return Err(e.into()),
        }
    };
    let global = self_reward(seq_lp.min(0.0), &config.policy)?;
    let exec = match rollout.end {
        RolloutEnd::Complete => judge.reward(&rollout.sql),
        RolloutEnd::DeadEnd | RolloutEnd::DepthLimit => ExecReward::Failed,
    };
    Ok(Simulation {
        final_sql: rollout.sql,
        simulated: rollout.fragments,
        end: rollout.end,
        reward: RewardBreakdown::blend(process, global, exec, config.delta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_arithmetic() {
        let r = RewardBreakdown::blend(94.0, 96.0, ExecReward::Matched, 0.5);
        assert_eq!(r.blended_q, 95.5);
        let r = RewardBreakdown::blend(94.0, 96.0, ExecReward::Failed, 0.25);
        assert!((r.blended_q - (0.25 * 94.0 + 0.75 * 95.0)).abs() < 1e-12);
    }
}
