//! Batch inference over task files and execution-accuracy scoring.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{
    compare_results, introspect_schema, DatabaseCatalog, DatabaseSchema, DbError, ExecReward, QueryTask, SqlEnv,
};
use crate::fragmenter::has_top_level_order_by;
use crate::policy::Policy;
use crate::search::{run_mcts, SearchConfig, SearchError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("task {0:?} has no gold SQL")]
    MissingGold(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("workers must be at least 1")]
    NoWorkers,
    #[error(transparent)]
    Config(#[from] SearchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    #[default]
    Ok,
    Failed,
}

/// One prediction record, as written to the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub id: String,
    pub db_id: String,
    pub predicted_sql: String,
    pub leaf_q: Option<f64>,
    pub exec_reward: Option<ExecReward>,
    #[serde(default)]
    pub rollouts_used: usize,
    #[serde(default)]
    pub nodes_created: usize,
    #[serde(default)]
    pub elapsed_ms: f64,
    #[serde(default)]
    pub early_stopped: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    #[serde(default)]
    pub candidates: usize,
    #[serde(default)]
    pub pruned: usize,
    #[serde(default)]
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskResult {
    pub fn failed(task: &QueryTask, error: impl ToString, elapsed_ms: f64) -> Self {
        Self {
            id: task.id.clone(),
            db_id: task.db_id.clone(),
            predicted_sql: String::new(),
            leaf_q: None,
            exec_reward: None,
            rollouts_used: 0,
            nodes_created: 0,
            elapsed_ms,
            early_stopped: false,
            fallback: false,
            candidates: 0,
            pruned: 0,
            status: TaskStatus::Failed,
            error: Some(error.to_string()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.status == TaskStatus::Failed
    }

    /// Failure caused by the policy service rather than the task itself.
    pub fn is_unavailable(&self) -> bool {
        self.is_failed() && self.error.as_deref().is_some_and(|e| e.starts_with(UNAVAILABLE_PREFIX))
    }
}

const UNAVAILABLE_PREFIX: &str = "policy unavailable";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    pub workers: usize,
    pub samples_per_column: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            samples_per_column: crate::db::DEFAULT_SAMPLES_PER_COLUMN,
        }
    }
}

/// Per-worker cache of open databases.
#[derive(Default)]
pub(crate) struct DbCache {
    open: HashMap<String, (DatabaseSchema, SqlEnv)>,
}

impl DbCache {
    pub(crate) fn get(
        &mut self,
        db_id: &str,
        catalog: &DatabaseCatalog,
        samples: usize,
    ) -> Result<&(DatabaseSchema, SqlEnv), DbError> {
        if !self.open.contains_key(db_id) {
            let path = catalog.resolve(db_id)?;
            let mut schema = introspect_schema(&path, samples)?;
            schema.db_id = db_id.to_string();
            let env = SqlEnv::open(&path)?;
            self.open.insert(db_id.to_string(), (schema, env));
        }
        Ok(&self.open[db_id])
    }
}

/// Runs `job` over every task on a pool of `workers` threads. Results come
/// back in task order.
pub(crate) fn run_pool<T, F>(tasks: &[QueryTask], workers: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut DbCache, &QueryTask) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(tasks.len()).max(1) {
            s.spawn(|| {
                let mut cache = DbCache::default();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(task) = tasks.get(i) else { break };
                    let out = job(&mut cache, task);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(out);
                }
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every task index is claimed by exactly one worker"))
        .collect()
}

fn search_one(
    cache: &mut DbCache,
    task: &QueryTask,
    catalog: &DatabaseCatalog,
    policy: &dyn Policy,
    config: &SearchConfig,
    samples: usize,
) -> TaskResult {
    let start = Instant::now();
    let elapsed = || start.elapsed().as_secs_f64() * 1e3;
    let (schema, env) = match cache.get(&task.db_id, catalog, samples) {
        Ok(pair) => pair,
        Err(e) => return TaskResult::failed(task, e, elapsed()),
    };
    match run_mcts(task, schema, policy, env, config) {
        Ok(out) => TaskResult {
            id: task.id.clone(),
            db_id: task.db_id.clone(),
            predicted_sql: out.final_sql,
            leaf_q: Some(out.leaf_q),
            exec_reward: Some(out.exec_reward),
            rollouts_used: out.stats.rollouts_used,
            nodes_created: out.stats.nodes_created,
            elapsed_ms: out.stats.elapsed_ms,
            early_stopped: out.stats.early_stopped,
            fallback: out.stats.fallback,
            candidates: out.stats.candidates,
            pruned: out.stats.pruned,
            status: TaskStatus::Ok,
            error: None,
        },
        Err(e @ SearchError::Policy(crate::policy::PolicyError::Unavailable(_))) => {
            log::error!("task {}: {e}", task.id);
            TaskResult::failed(task, e, elapsed())
        }
        Err(e) => {
            log::warn!("task {}: {e}", task.id);
            TaskResult::failed(task, e, elapsed())
        }
    }
}

/// Searches every task. Failed tasks yield a record with
/// `status = "failed"`; none are dropped and order is preserved.
pub fn run_inference(
    tasks: &[QueryTask],
    catalog: &DatabaseCatalog,
    policy: &dyn Policy,
    config: &SearchConfig,
    options: &InferenceOptions,
) -> Result<Vec<TaskResult>, EvalError> {
    if options.workers == 0 {
        return Err(EvalError::NoWorkers);
    }
    config.validate()?;
    Ok(run_pool(tasks, options.workers, |cache, task| {
        search_one(cache, task, catalog, policy, config, options.samples_per_column)
    }))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, results: &[TaskResult]) -> Result<(), EvalError> {
    write_jsonl(path, results)
}

pub fn read_predictions(path: &Path) -> Result<Vec<TaskResult>, EvalError> {
    read_jsonl(path)
}

/// Scoring verdict for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTask {
    pub id: String,
    pub db_id: String,
    pub predicted_sql: String,
    pub correct: bool,
    /// Prediction missing, failed, or erroring on execution.
    pub error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub ex_correct: usize,
    /// `ex_correct / total`, and 0 for an empty task list.
    pub ex: f64,
    pub errors: usize,
    pub per_task: Vec<ScoredTask>,
    /// Summed per-task search time, seconds.
    pub wall_time: f64,
    /// Tasks per minute of search time.
    pub throughput: f64,
    /// Test-suite accuracy; needs external databases and is never computed here.
    pub ts: Option<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "EX {:.4} ({}/{}), errors {}, wall time {:.3} s, throughput {:.1} tasks/min",
            self.ex, self.ex_correct, self.total, self.errors, self.wall_time, self.throughput
        )
    }
}

/// Execution accuracy of `predictions` against the gold SQL of `tasks`.
///
/// Tasks are scored in task order and predictions are matched by id, so
/// the prediction order is irrelevant. A missing or failed prediction is
/// incorrect.
pub fn score_ex(
    predictions: &[TaskResult],
    tasks: &[QueryTask],
    catalog: &DatabaseCatalog,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    if let Some(t) = tasks.iter().find(|t| t.gold_sql.is_none()) {
        return Err(EvalError::MissingGold(t.id.clone()));
    }
    let by_id: HashMap<&str, &TaskResult> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let timeout = Duration::from_millis(crate::db::DEFAULT_TIMEOUT_MS);
    let per_task = run_pool(tasks, workers.max(1), |cache, task| {
        let pred = by_id.get(task.id.as_str());
        let sql = pred.map(|p| p.predicted_sql.clone()).unwrap_or_default();
        let mut scored = ScoredTask {
            id: task.id.clone(),
            db_id: task.db_id.clone(),
            predicted_sql: sql.clone(),
            correct: false,
            error: true,
        };
        if pred.is_none_or(|p| p.is_failed()) || sql.trim().is_empty() {
            return scored;
        }
        let Ok((_, env)) = cache.get(&task.db_id, catalog, 0) else {
            return scored;
        };
        let gold_sql = task.gold_sql.as_deref().expect("checked above");
        let gold = env.execute(gold_sql, timeout);
        let out = env.execute(&sql, timeout);
        scored.error = out.is_error();
        scored.correct = compare_results(&out, &gold, has_top_level_order_by(gold_sql)).unwrap_or(false);
        scored
    });
    let total = per_task.len();
    let ex_correct = per_task.iter().filter(|s| s.correct).count();
    let errors = per_task.iter().filter(|s| s.error).count();
    let wall_ms: f64 = tasks
        .iter()
        .filter_map(|t| by_id.get(t.id.as_str()))
        .map(|p| p.elapsed_ms)
        .sum();
    let wall_time = wall_ms / 1e3;
    Ok(EvalReport {
        total,
        ex_correct,
        ex: if total == 0 { 0.0 } else { ex_correct as f64 / total as f64 },
        errors,
        per_task,
        wall_time,
        throughput: if wall_time > 0.0 { total as f64 * 60.0 / wall_time } else { 0.0 },
        ts: None,
    })
}

/// One row of a pruning-strength sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub ex: f64,
    pub mean_time_ms: f64,
    /// Pruned over considered expansion candidates.
    pub early_prune_rate: f64,
    pub total_nodes: usize,
    pub mean_nodes: f64,
    pub failures: usize,
}

/// Runs the whole task list once per `lambda` and scores each run.
pub fn lambda_sweep(
    tasks: &[QueryTask],
    catalog: &DatabaseCatalog,
    policy: &dyn Policy,
    base: &SearchConfig,
    lambdas: &[f64],
    options: &InferenceOptions,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut config = base.clone();
        config.pruning.lambda = lambda;
        let results = run_inference(tasks, catalog, policy, &config, options)?;
        let report = score_ex(&results, tasks, catalog, options.workers)?;
        let n = results.len().max(1) as f64;
        let candidates: usize = results.iter().map(|r| r.candidates).sum();
        let pruned: usize = results.iter().map(|r| r.pruned).sum();
        let total_nodes: usize = results.iter().map(|r| r.nodes_created).sum();
        rows.push(SweepRow {
            lambda,
            ex: report.ex,
            mean_time_ms: results.iter().map(|r| r.elapsed_ms).sum::<f64>() / n,
            early_prune_rate: if candidates == 0 { 0.0 } else { pruned as f64 / candidates as f64 },
            total_nodes,
            mean_nodes: total_nodes as f64 / n,
            failures: results.iter().filter(|r| r.is_failed()).count(),
        });
    }
    Ok(rows)
}
