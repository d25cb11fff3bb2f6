//! Training-corpus preparation: schema-aware SFT pairs, failure collection
//! and prefix-truncated (PSG) completion pairs.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{serialize_context, DatabaseCatalog, ExecReward, ExecutionJudge, QueryTask, RewardMode};
use crate::evaluate::{run_pool, TaskResult, TaskStatus};
use crate::fragmenter::{is_complete_sql, truncate_for_psg, BoundarySet};
use crate::policy::{Policy, PolicyConfig};
use crate::search::{greedy_decode, SearchConfig};

/// Default PSG share of the mixed training corpus.
pub const DEFAULT_PSG_RATIO: f64 = 0.227;

#[derive(Debug, Error)]
pub enum DataPrepError {
    #[error("prediction references unknown task id {0:?}")]
    UnknownTaskId(String),
    #[error("psg ratio must be in [0, 1), got {0}")]
    InvalidRatio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
    pub source_task_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsgRecord {
    pub prompt: String,
    pub completion: String,
    pub source_task_id: String,
    /// Index of the cut among the query's boundary cuts, in text order.
    pub cut_index: usize,
}

/// The plain `{prompt, completion}` line fed to external trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub prompt: String,
    pub completion: String,
}

/// A task that produced no record, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub task_id: String,
    pub reason: String,
}

/// Orders numeric ids numerically and ahead of other ids.
pub fn natural_id_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn sorted_by_id(tasks: &[QueryTask]) -> Vec<QueryTask> {
    let mut v = tasks.to_vec();
    v.sort_by(|a, b| natural_id_cmp(&a.id, &b.id));
    v
}

fn exec_timeout() -> Duration {
    Duration::from_millis(crate::db::DEFAULT_TIMEOUT_MS)
}

/// One record per task whose gold SQL runs on its database, in id order.
pub fn build_sft_corpus(
    tasks: &[QueryTask],
    catalog: &DatabaseCatalog,
    samples_per_column: usize,
    workers: usize,
) -> (Vec<SftRecord>, Vec<Skipped>) {
    let tasks = sorted_by_id(tasks);
    let results = run_pool(&tasks, workers.max(1), |cache, task| {
        let skip = |reason: String| {
            log::warn!("sft: skipping task {}: {reason}", task.id);
            Err(Skipped {
                task_id: task.id.clone(),
                reason,
            })
        };
        let Some(gold) = task.gold_sql.as_deref() else {
            return skip("no gold SQL".into());
        };
        let (schema, env) = match cache.get(&task.db_id, catalog, samples_per_column) {
            Ok(pair) => pair,
            Err(e) => return skip(e.to_string()),
        };
        let out = env.execute(gold, exec_timeout());
        if let Some(msg) = out.error_message {
            return skip(format!("gold SQL fails: {msg}"));
        }
        Ok(SftRecord {
            prompt: serialize_context(schema, &task.question, task.evidence.as_deref()),
            completion: gold.to_string(),
            source_task_id: task.id.clone(),
        })
    });
    split(results)
}

fn split<T>(results: Vec<Result<T, Skipped>>) -> (Vec<T>, Vec<Skipped>) {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(s) => skipped.push(s),
        }
    }
    (ok, skipped)
}

/// Tasks whose prediction does not reproduce the gold result. Each
/// prediction is re-executed against the gold SQL; failed or erroring
/// predictions count as failures. Tasks without a prediction are ignored.
pub fn collect_failures(
    predictions: &[TaskResult],
    tasks: &[QueryTask],
    catalog: &DatabaseCatalog,
    workers: usize,
) -> Result<Vec<QueryTask>, DataPrepError> {
    let by_id: HashMap<&str, &QueryTask> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut joined = Vec::with_capacity(predictions.len());
    for p in predictions {
        let task = by_id
            .get(p.id.as_str())
            .ok_or_else(|| DataPrepError::UnknownTaskId(p.id.clone()))?;
        joined.push(((*task).clone(), p));
    }
    let pairs: Vec<QueryTask> = joined.iter().map(|(t, _)| t.clone()).collect();
    let preds: HashMap<&str, &TaskResult> = joined.iter().map(|(t, p)| (t.id.as_str(), *p)).collect();
    let failed = run_pool(&pairs, workers.max(1), |cache, task| {
        let pred = preds[task.id.as_str()];
        if pred.status == TaskStatus::Failed || task.gold_sql.is_none() {
            return true;
        }
        let Ok((_, env)) = cache.get(&task.db_id, catalog, 0) else {
            return true;
        };
        match ExecutionJudge::new(env, task.gold_sql.as_deref(), RewardMode::Oracle, exec_timeout()) {
            Ok(judge) => judge.reward(&pred.predicted_sql) != ExecReward::Matched,
            Err(_) => true,
        }
    });
    Ok(pairs
        .into_iter()
        .zip(failed)
        .filter_map(|(t, f)| f.then_some(t))
        .collect())
}

/// Greedy, temperature-0 decodes for every task, used as the baseline
/// whose failures seed the PSG corpus.
pub fn greedy_predictions(
    tasks: &[QueryTask],
    catalog: &DatabaseCatalog,
    policy: &dyn Policy,
    config: &SearchConfig,
    samples_per_column: usize,
    workers: usize,
) -> Vec<TaskResult> {
    let policy_config = PolicyConfig {
        decode_temperature: 0.0,
        ..config.policy.clone()
    };
    run_pool(tasks, workers.max(1), |cache, task| {
        let start = Instant::now();
        let elapsed = || start.elapsed().as_secs_f64() * 1e3;
        let (schema, _) = match cache.get(&task.db_id, catalog, samples_per_column) {
            Ok(pair) => pair,
            Err(e) => return TaskResult::failed(task, e, elapsed()),
        };
        let context = serialize_context(schema, &task.question, task.evidence.as_deref());
        match greedy_decode(policy, &context, &policy_config, config.max_depth) {
            Ok(sql) => TaskResult {
                id: task.id.clone(),
                db_id: task.db_id.clone(),
                fallback: !is_complete_sql(&sql),
                predicted_sql: sql,
                leaf_q: None,
                exec_reward: None,
                rollouts_used: 0,
                nodes_created: 0,
                elapsed_ms: elapsed(),
                early_stopped: false,
                candidates: 0,
                pruned: 0,
                status: TaskStatus::Ok,
                error: None,
            },
            Err(e) => TaskResult::failed(task, e, elapsed()),
        }
    })
}

/// Prefix/completion pairs for each failure task, at most
/// `sample_per_query` per task, longest prefixes first. Records come out in
/// task-id order, then by cut.
pub fn build_psg_corpus(
    failures: &[QueryTask],
    catalog: &DatabaseCatalog,
    sample_per_query: usize,
    samples_per_column: usize,
    workers: usize,
) -> (Vec<PsgRecord>, Vec<Skipped>) {
    let tasks = sorted_by_id(failures);
    let boundaries = BoundarySet::default();
    let results = run_pool(&tasks, workers.max(1), |cache, task| {
        let skip = |reason: String| {
            log::warn!("psg: skipping task {}: {reason}", task.id);
            Err(Skipped {
                task_id: task.id.clone(),
                reason,
            })
        };
        let Some(gold) = task.gold_sql.as_deref() else {
            return skip("no gold SQL".into());
        };
        let pairs = match truncate_for_psg(gold, &boundaries) {
            Ok(p) => p,
            Err(e) => return skip(e.to_string()),
        };
        let (schema, _) = match cache.get(&task.db_id, catalog, samples_per_column) {
            Ok(pair) => pair,
            Err(e) => return skip(e.to_string()),
        };
        let context = serialize_context(schema, &task.question, task.evidence.as_deref());
        let first_kept = pairs.len().saturating_sub(sample_per_query);
        Ok(pairs
            .into_iter()
            .enumerate()
            .skip(first_kept)
            .filter(|(_, p)| format!("{}{}", p.prefix, p.completion) == gold)
            .map(|(i, p)| PsgRecord {
                prompt: format!("{context}{}", p.prefix),
                completion: p.completion,
                source_task_id: task.id.clone(),
                cut_index: i,
            })
            .collect::<Vec<_>>())
    });
    let (nested, skipped) = split(results);
    (nested.into_iter().flatten().collect(), skipped)
}

/// Number of PSG records that makes them `ratio` of the mixed corpus.
pub fn psg_target(sft_len: usize, ratio: f64) -> Result<usize, DataPrepError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(DataPrepError::InvalidRatio(ratio));
    }
    Ok((ratio / (1.0 - ratio) * sft_len as f64).round() as usize)
}

/// SFT records followed by a seeded, order-preserving subsample of the PSG
/// records sized by [`psg_target`].
pub fn mix_corpus(sft: &[SftRecord], psg: &[PsgRecord], ratio: f64, seed: u64) -> Result<Vec<TrainRecord>, DataPrepError> {
    let k = psg_target(sft.len(), ratio)?.min(psg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, psg.len(), k).into_vec();
    picked.sort_unstable();
    let mut out: Vec<TrainRecord> = sft
        .iter()
        .map(|r| TrainRecord {
            prompt: r.prompt.clone(),
            completion: r.completion.clone(),
        })
        .collect();
    out.extend(picked.into_iter().map(|i| TrainRecord {
        prompt: psg[i].prompt.clone(),
        completion: psg[i].completion.clone(),
    }));
    Ok(out)
}
