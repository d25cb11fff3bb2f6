use std::path::PathBuf;

use sqlo1::db::{
    execution_reward, introspect_schema, load_tasks, serialize_context, DatabaseSchema, ExecReward, QueryTask,
    RewardMode, SqlEnv,
};
use sqlo1::policy::{Policy, ScriptEntry, ScriptedPolicy};
use sqlo1::search::{greedy_decode, run_mcts, Mcts, RolloutEnd, SearchConfig, SearchOutcome, SearchTree};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

struct Suite {
    tasks: Vec<QueryTask>,
    policy: ScriptedPolicy,
    schema: DatabaseSchema,
    env: SqlEnv,
}

fn suite() -> Suite {
    let db = fixtures().join("music.sqlite");
    Suite {
        tasks: load_tasks(&fixtures().join("tasks.json")).unwrap(),
        policy: ScriptedPolicy::from_file(&fixtures().join("trie.json")).unwrap(),
        schema: introspect_schema(&db, 3).unwrap(),
        env: SqlEnv::open(&db).unwrap(),
    }
}

fn matched(task: &QueryTask, sql: &str) -> bool {
    let db = fixtures().join("music.sqlite");
    execution_reward(&db, sql, task.gold_sql.as_deref(), RewardMode::Oracle).unwrap() == ExecReward::Matched
}

fn with_rollouts(n: usize) -> SearchConfig {
    SearchConfig {
        n_rollouts: n,
        ..SearchConfig::default()
    }
}

/// Node shape without reward values, for comparing trees across reward scales.
fn tree_shape(tree: &SearchTree) -> Vec<(String, Option<usize>, u32, bool)> {
    tree.nodes()
        .iter()
        .map(|n| (n.sql.clone(), n.parent, n.visits, n.is_terminal))
        .collect()
}

#[test]
fn spider_preset_recovers_every_fixture_task() {
    let s = suite();
    for task in &s.tasks {
        let out = run_mcts(task, &s.schema, &s.policy, &s.env, &SearchConfig::default()).unwrap();
        assert!(matched(task, &out.final_sql), "{}: {:?}", task.id, out.final_sql);
        assert_eq!(out.exec_reward, ExecReward::Matched);
        assert!(out.stats.early_stopped, "{}: a match should stop the search", task.id);
        assert!(!out.stats.fallback);
    }
}

#[test]
fn one_rollout_follows_greedy_and_misses_adversarial_tasks() {
    let s = suite();
    let mut greedy_wrong = Vec::new();
    for task in &s.tasks {
        let ctx = serialize_context(&s.schema, &task.question, task.evidence.as_deref());
        let greedy = greedy_decode(&s.policy, &ctx, &SearchConfig::default().policy, 8).unwrap();
        let one = run_mcts(task, &s.schema, &s.policy, &s.env, &with_rollouts(1)).unwrap();
        assert_eq!(one.final_sql.trim_end_matches(';'), greedy.trim_end_matches(';'), "{}", task.id);
        if !matched(task, &greedy) {
            greedy_wrong.push(task.id.as_str());
            let six = run_mcts(task, &s.schema, &s.policy, &s.env, &with_rollouts(6)).unwrap();
            assert!(matched(task, &six.final_sql), "{}: six rollouts gave {:?}", task.id, six.final_sql);
            assert!(six.stats.rollouts_used > 1);
        }
    }
    assert_eq!(greedy_wrong, ["t02", "t03", "t10"]);
}

#[test]
fn repeated_runs_are_identical() {
    let s = suite();
    let cfg = SearchConfig {
        early_stop: false,
        ..SearchConfig::default()
    };
    for task in &s.tasks {
        let a = run_mcts(task, &s.schema, &s.policy, &s.env, &cfg).unwrap();
        let b = run_mcts(task, &s.schema, &s.policy, &s.env, &cfg).unwrap();
        assert_eq!(a.final_sql, b.final_sql);
        assert_eq!(a.leaf_q.to_bits(), b.leaf_q.to_bits());
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.tree.nodes(), b.tree.nodes());
    }
}

#[test]
fn without_early_stop_all_rollouts_run_within_budget() {
    let s = suite();
    let cfg = SearchConfig {
        early_stop: false,
        ..SearchConfig::default()
    };
    for task in &s.tasks {
        let out = run_mcts(task, &s.schema, &s.policy, &s.env, &cfg).unwrap();
        assert!(!out.stats.early_stopped);
        assert!(out.stats.rollouts_used <= cfg.n_rollouts);
        assert_eq!(out.stats.nodes_created, out.tree.len());
        assert!(out.stats.nodes_created <= cfg.node_budget(), "{}", task.id);
        let best = out.trajectory.as_ref().expect("a complete trajectory");
        assert_eq!(best.end, RolloutEnd::Complete);
        for t in &out.trajectories {
            if t.end == RolloutEnd::Complete {
                assert!(t.leaf_q <= best.leaf_q);
            }
        }
    }
}

#[test]
fn blind_mode_never_reports_a_match() {
    let s = suite();
    let cfg = SearchConfig {
        reward_mode: RewardMode::Blind,
        ..SearchConfig::default()
    };
    for task in &s.tasks {
        let blind = QueryTask {
            gold_sql: None,
            ..task.clone()
        };
        let out = run_mcts(&blind, &s.schema, &s.policy, &s.env, &cfg).unwrap();
        assert_ne!(out.exec_reward, ExecReward::Matched);
        assert!(out.trajectories.iter().all(|t| t.reward.exec_reward != ExecReward::Matched));
        assert!(!out.stats.early_stopped);
    }
}

fn shifted_beta(beta: f64) -> SearchConfig {
    let mut cfg = SearchConfig {
        early_stop: false,
        ..SearchConfig::default()
    };
    cfg.policy.beta = beta;
    cfg.pruning.enabled = false;
    cfg
}

#[test]
fn shifting_beta_leaves_the_search_unchanged() {
    // A constant added to every reward cancels in UCT comparisons, means
    // and maxima, so the trees must match node for node.
    let s = suite();
    for task in &s.tasks {
        let a = run_mcts(task, &s.schema, &s.policy, &s.env, &shifted_beta(100.0)).unwrap();
        let b = run_mcts(task, &s.schema, &s.policy, &s.env, &shifted_beta(250.0)).unwrap();
        assert_eq!(a.final_sql, b.final_sql, "{}", task.id);
        assert_eq!(tree_shape(&a.tree), tree_shape(&b.tree), "{}", task.id);
        let diff = b.leaf_q - a.leaf_q;
        assert!((diff - 150.0).abs() < 1e-9, "{}: leaf Q moved by {diff}", task.id);
    }
}

/// Two-level trie whose every completion executes, so the execution reward
/// is 0 everywhere in blind mode.
fn all_valid_policy() -> ScriptedPolicy {
    let mut p = ScriptedPolicy::new().with_state(
        "",
        vec![
            ScriptEntry::new("SELECT name ", -0.7),
            ScriptEntry::new("SELECT age ", -1.1),
            ScriptEntry::new("SELECT country ", -0.9),
        ],
    );
    for (i, col) in ["name", "age", "country"].into_iter().enumerate() {
        let bias = 0.13 * i as f64;
        p = p
            .with_state(
                &format!("SELECT {col} "),
                vec![
                    ScriptEntry::new("FROM singer;", -0.9 - bias).ending(),
                    ScriptEntry::new("FROM singer ", -0.3 - bias),
                ],
            )
            .with_state(
                &format!("SELECT {col} FROM singer "),
                vec![
                    ScriptEntry::new("WHERE age > 30;", -2.0 + bias).ending(),
                    ScriptEntry::new("ORDER BY age;", -1.3 - bias).ending(),
                ],
            );
    }
    p
}

fn scaled_alpha(alpha: f64) -> SearchConfig {
    let mut cfg = SearchConfig {
        reward_mode: RewardMode::Blind,
        exploration_weight: 0.0,
        ..SearchConfig::default()
    };
    cfg.policy.alpha = alpha;
    cfg.pruning.enabled = false;
    cfg
}

#[test]
fn scaling_alpha_is_order_preserving_with_exploration_off() {
    let s = suite();
    let policy = all_valid_policy();
    let task = QueryTask {
        id: "affine".into(),
        question: "Any singer attribute.".into(),
        db_id: "music".into(),
        gold_sql: None,
        evidence: None,
    };
    let base = run_mcts(&task, &s.schema, &policy, &s.env, &scaled_alpha(0.6)).unwrap();
    assert!(base.trajectories.iter().all(|t| t.reward.exec_reward == ExecReward::Neutral));
    for alpha in [0.3, 1.2, 5.0] {
        let other = run_mcts(&task, &s.schema, &policy, &s.env, &scaled_alpha(alpha)).unwrap();
        assert_eq!(base.final_sql, other.final_sql, "alpha {alpha}");
        assert_eq!(tree_shape(&base.tree), tree_shape(&other.tree), "alpha {alpha}");
    }
}

#[test]
fn rollouts_can_be_driven_one_at_a_time() {
    let s = suite();
    let task = s.tasks.iter().find(|t| t.id == "t10").unwrap();
    let ctx = serialize_context(&s.schema, &task.question, task.evidence.as_deref());
    let cfg = SearchConfig::default();
    let mut mcts = Mcts::new(ctx, task.gold_sql.as_deref(), &s.policy, &s.env, &cfg).unwrap();
    let mut visits = Vec::new();
    for _ in 0..3 {
        let t = mcts.rollout().unwrap().clone();
        assert_eq!(t.nodes[0], SearchTree::ROOT);
        visits.push(mcts.tree().node(SearchTree::ROOT).visits);
    }
    assert_eq!(visits, [1, 2, 3]);
    let out: SearchOutcome = mcts.run().unwrap();
    assert!(out.stats.rollouts_used >= 3);
}

#[test]
fn arc_wrapped_policy_searches_the_same() {
    let s = suite();
    let shared: std::sync::Arc<dyn Policy> = std::sync::Arc::new(suite().policy);
    for task in s.tasks.iter().take(3) {
        let a = run_mcts(task, &s.schema, &s.policy, &s.env, &SearchConfig::default()).unwrap();
        let b = run_mcts(task, &s.schema, shared.as_ref(), &s.env, &SearchConfig::default()).unwrap();
        assert_eq!(a.final_sql, b.final_sql);
    }
}
