//! Monte Carlo tree search over partial SQL: selection, expansion,
//! simulation, backpropagation and final trajectory choice.

mod expand;
mod simulate;
mod tree;

use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{serialize_context, DatabaseSchema, DbError, ExecReward, ExecutionJudge, QueryTask, RewardMode, SqlEnv};
use crate::fragmenter::BoundarySet;
use crate::policy::{Policy, PolicyConfig, PolicyError};
use crate::pruning::{PruningConfig, PruningError};

pub use expand::{dedupe_similar, fragment_token_set, jaccard, Candidate, ExpansionStats};
pub use simulate::{RewardBreakdown, RolloutEnd, Simulation};
pub use tree::{NodeId, SearchNode, SearchTree};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
}

impl SearchError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, SearchError::Policy(PolicyError::Unavailable(_)))
    }
}

/// Named hyperparameter sets for the two benchmark styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Spider,
    Bird,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spider" => Ok(Preset::Spider),
            "bird" => Ok(Preset::Bird),
            other => Err(format!("unknown preset {other:?} (expected spider or bird)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_rollouts: usize,
    pub top_d: usize,
    pub max_depth: usize,
    pub exploration_weight: f64,
    pub delta: f64,
    pub similarity_threshold: f64,
    pub reward_mode: RewardMode,
    /// Stop at the first execution match. Only honoured in oracle mode.
    pub early_stop: bool,
    pub exec_timeout_ms: u64,
    pub policy: PolicyConfig,
    pub pruning: PruningConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::preset(Preset::Spider)
    }
}

impl SearchConfig {
    pub fn preset(preset: Preset) -> Self {
        let (n_rollouts, max_depth, exploration_weight) = match preset {
            Preset::Spider => (6, 8, 0.7),
            Preset::Bird => (8, 12, 0.8),
        };
        Self {
            n_rollouts,
            top_d: 3,
            max_depth,
            exploration_weight,
            delta: 0.5,
            similarity_threshold: 0.7,
            reward_mode: RewardMode::Oracle,
            early_stop: true,
            exec_timeout_ms: crate::db::DEFAULT_TIMEOUT_MS,
            policy: PolicyConfig::default(),
            pruning: PruningConfig::for_depth(max_depth),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidConfig(m));
        if self.n_rollouts == 0 {
            return bad("n_rollouts must be at least 1".into());
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        if self.top_d == 0 || self.top_d > self.policy.beam_width {
            return bad(format!(
                "top_d must be in 1..={} (the beam width), got {}",
                self.policy.beam_width, self.top_d
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must be in (0, 1), got {}", self.delta));
        }
        if !(self.exploration_weight >= 0.0 && self.exploration_weight.is_finite()) {
            return bad("exploration_weight must be non-negative".into());
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return bad("similarity_threshold must be in (0, 1]".into());
        }
        if self.exec_timeout_ms == 0 {
            return bad("exec_timeout_ms must be positive".into());
        }
        self.policy.validate()?;
        self.pruning.validate()?;
        Ok(())
    }

    /// Upper bound on nodes a run may create, root included.
    pub fn node_budget(&self) -> usize {
        1 + self.n_rollouts * self.top_d * self.max_depth
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub nodes_created: usize,
    pub rollouts_used: usize,
    pub elapsed_ms: f64,
    pub early_stopped: bool,
    /// No rollout reached complete SQL; the prediction is a greedy decode.
    pub fallback: bool,
    /// Expansion candidates that reached the pruning filter.
    pub candidates: usize,
    pub pruned: usize,
}

/// A completed simulation, anchored at the tree node it started from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    /// Root-to-leaf tree nodes.
    pub nodes: Vec<NodeId>,
    /// Greedy fragments appended after the leaf.
    pub simulated: Vec<String>,
    pub final_sql: String,
    pub leaf_q: f64,
    pub end: RolloutEnd,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchOutcome {
    pub final_sql: String,
    pub leaf_q: f64,
    pub exec_reward: ExecReward,
    pub reward: RewardBreakdown,
    pub stats: SearchStats,
    pub trajectory: Option<Trajectory>,
    /// Every completed simulation in rollout order.
    pub trajectories: Vec<Trajectory>,
    #[serde(skip)]
    pub tree: SearchTree,
}

/// Search state for one task. Owned by a single worker.
pub struct Mcts<'a> {
    policy: &'a dyn Policy,
    judge: ExecutionJudge<'a>,
    config: &'a SearchConfig,
    boundaries: BoundarySet,
    tree: SearchTree,
    stats: SearchStats,
    trajectories: Vec<Trajectory>,
}

impl<'a> Mcts<'a> {
    pub fn new(
        context: String,
        gold_sql: Option<&str>,
        policy: &'a dyn Policy,
        env: &'a SqlEnv,
        config: &'a SearchConfig,
    ) -> Result<Self, SearchError> {
        config.validate()?;
        let timeout = Duration::from_millis(config.exec_timeout_ms);
        let judge = ExecutionJudge::new(env, gold_sql, config.reward_mode, timeout)?;
        Ok(Self {
            policy,
            judge,
            config,
            boundaries: BoundarySet::default(),
            tree: SearchTree::new(context),
            stats: SearchStats::default(),
            trajectories: Vec::new(),
        })
    }

    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    /// One select, expand, simulate, backpropagate cycle. Returns the
    /// trajectory it completed.
    pub fn rollout(&mut self) -> Result<&Trajectory, SearchError> {
        let mut path = self.tree.select(self.config.exploration_weight);
        let leaf = *path.last().expect("selection path starts at the root");
        let node = self.tree.node(leaf);
        if !node.is_terminal && node.depth < self.config.max_depth {
            let (children, stats) = expand::expand(&mut self.tree, leaf, self.policy, &self.boundaries, self.config)?;
            self.stats.candidates += stats.candidates;
            self.stats.pruned += stats.pruned;
            if let Some(&first) = children.first() {
                path.push(first);
            }
        }
        let sim_node = *path.last().expect("non-empty path");
        let sim = simulate::simulate(&self.tree, sim_node, self.policy, &self.judge, &self.boundaries, self.config)?;
        self.tree.backpropagate(&path, sim.reward.blended_q);
        self.stats.rollouts_used += 1;
        self.trajectories.push(Trajectory {
            nodes: path,
            simulated: sim.simulated,
            final_sql: sim.final_sql,
            leaf_q: sim.reward.blended_q,
            end: sim.end,
            reward: sim.reward,
        });
        Ok(self.trajectories.last().expect("just pushed"))
    }

    /// Runs up to `n_rollouts` cycles and picks the final SQL.
    pub fn run(mut self) -> Result<SearchOutcome, SearchError> {
        let start = Instant::now();
        let early = self.config.early_stop && self.config.reward_mode == RewardMode::Oracle;
        for _ in 0..self.config.n_rollouts {
            let t = self.rollout()?;
            if early && t.reward.exec_reward == ExecReward::Matched {
                self.stats.early_stopped = true;
                break;
            }
            if self.tree.node(SearchTree::ROOT).dead_end {
                break;
            }
        }
        self.stats.nodes_created = self.tree.len();
        debug_assert!(self.stats.nodes_created <= self.config.node_budget());

        let best = self.best_trajectory().cloned();
        let (final_sql, reward, trajectory) = match best {
            Some(t) => (t.final_sql.clone(), t.reward, Some(t)),
            None => {
                self.stats.fallback = true;
                let sim = simulate::simulate(&self.tree, SearchTree::ROOT, self.policy, &self.judge, &self.boundaries, self.config)
                    .or_else(|e| if e.is_unavailable() { Err(e) } else { Ok(empty_simulation(self.config)) })?;
                (sim.final_sql, sim.reward, None)
            }
        };
        self.stats.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(SearchOutcome {
            final_sql,
            leaf_q: reward.blended_q,
            exec_reward: reward.exec_reward,
            reward,
            stats: self.stats,
            trajectory,
            trajectories: self.trajectories,
            tree: self.tree,
        })
    }

    /// Highest leaf Q among complete trajectories; ties go to the higher
    /// whole-query reward, then the earliest.
    fn best_trajectory(&self) -> Option<&Trajectory> {
        let mut best: Option<&Trajectory> = None;
        for t in self.trajectories.iter().filter(|t| t.end == RolloutEnd::Complete) {
            let better = best.is_none_or(|b| {
                t.leaf_q > b.leaf_q || (t.leaf_q == b.leaf_q && t.reward.global_reward > b.reward.global_reward)
            });
            if better {
                best = Some(t);
            }
        }
        best
    }
}

fn empty_simulation(config: &SearchConfig) -> Simulation {
    let beta = config.policy.beta;
    Simulation {
        final_sql: String::new(),
        simulated: Vec::new(),
        end: RolloutEnd::DeadEnd,
        reward: RewardBreakdown::blend(beta, beta, ExecReward::Failed, config.delta),
    }
}

/// Greedy decode of a whole query from the empty state.
pub fn greedy_decode(policy: &dyn Policy, context: &str, config: &PolicyConfig, max_depth: usize) -> Result<String, SearchError> {
    let r = simulate::greedy_rollout(policy, context, "", 0, false, &BoundarySet::default(), config, max_depth)?;
    Ok(r.sql)
}

/// Searches for the SQL answering `task` over `env`'s database.
pub fn run_mcts(
    task: &QueryTask,
    schema: &DatabaseSchema,
    policy: &dyn Policy,
    env: &SqlEnv,
    config: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    let context = serialize_context(schema, &task.question, task.evidence.as_deref());
    let gold = match config.reward_mode {
        RewardMode::Oracle => task.gold_sql.as_deref(),
        RewardMode::Blind => None,
    };
    Mcts::new(context, gold, policy, env, config)?.run()
}
