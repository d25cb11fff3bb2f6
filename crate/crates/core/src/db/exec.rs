use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use super::{open_read_only, DbError};
use crate::fragmenter::has_top_level_order_by;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// A normalized result cell. Reals are rounded to 1e-6; a real with no
/// fractional part after rounding compares equal to the same integer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    Null,
    Int(i64),
    Real(String),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    pub fn from_real(x: f64) -> Cell {
        if !x.is_finite() {
            return Cell::Real(x.to_string());
        }
        let r = (x * 1e6).round() / 1e6;
        if r.fract() == 0.0 && r.abs() < 9.0e15 {
            return Cell::Int(r as i64);
        }
        let s = format!("{r:.6}");
        Cell::Real(if s == "-0.000000" { "0.000000".into() } else { s })
    }

    fn from_value(v: ValueRef<'_>) -> Cell {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Int(i),
            ValueRef::Real(r) => Cell::from_real(r),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }
}

pub type Row = Vec<Cell>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Error,
    Empty,
    Rows,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    /// Rows in engine order; comparison decides whether order matters.
    pub rows: Vec<Row>,
    pub elapsed_ms: f64,
    pub error_message: Option<String>,
}

impl ExecutionOutcome {
    pub fn error(message: impl Into<String>, elapsed_ms: f64) -> Self {
        Self {
            status: ExecStatus::Error,
            rows: Vec::new(),
            elapsed_ms,
            error_message: Some(message.into()),
        }
    }

    pub fn from_rows(rows: Vec<Row>, elapsed_ms: f64) -> Self {
        let status = if rows.is_empty() { ExecStatus::Empty } else { ExecStatus::Rows };
        Self {
            status,
            rows,
            elapsed_ms,
            error_message: None,
        }
    }

    pub fn is_error(&self) -> bool {
        self.status == ExecStatus::Error
    }
}

/// A read-only connection to one database file. Not shared across threads;
/// each worker opens its own.
pub struct SqlEnv {
    conn: Connection,
    path: PathBuf,
}

impl SqlEnv {
    pub fn open(path: &Path) -> Result<Self, DbError> {
        let conn = open_read_only(path)?;
        // a malformed file only fails on first read
        conn.query_row("SELECT count(*) FROM sqlite_master", [], |_| Ok(()))
            .map_err(|e| DbError::from_sqlite(path, e))?;
        Ok(Self {
            conn,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Runs one read-only statement, aborting it once `timeout` elapses.
    pub fn execute(&self, sql: &str, timeout: Duration) -> ExecutionOutcome {
        let start = Instant::now();
        let deadline = start + timeout;
        self.conn.progress_handler(1_000, Some(move || Instant::now() >= deadline));
        let result = self.run(sql);
        self.conn.progress_handler(0, None::<fn() -> bool>);
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok(rows) => ExecutionOutcome::from_rows(rows, elapsed_ms),
            Err(_) if Instant::now() >= deadline => ExecutionOutcome::error("timeout", elapsed_ms),
            Err(e) => ExecutionOutcome::error(e.to_string(), elapsed_ms),
        }
    }

    fn run(&self, sql: &str) -> Result<Vec<Row>, rusqlite::Error> {
        let mut stmt = self.conn.prepare(sql)?;
        let width = stmt.column_count();
        // ATTACH and transaction control count as read-only but return no columns
        if !stmt.readonly() || width == 0 {
            return Err(rusqlite::Error::InvalidQuery);
        }
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut cells = Vec::with_capacity(width);
            for i in 0..width {
                cells.push(Cell::from_value(row.get_ref(i)?));
            }
            out.push(cells);
        }
        Ok(out)
    }
}

/// Opens `db_path` read-only and runs `sql` once. An unopenable database is
/// reported as an error outcome, like any engine failure.
pub fn execute_sql(db_path: &Path, sql: &str, timeout_ms: u64) -> ExecutionOutcome {
    match SqlEnv::open(db_path) {
        Ok(env) => env.execute(sql, Duration::from_millis(timeout_ms)),
        Err(e) => ExecutionOutcome::error(e.to_string(), 0.0),
    }
}

fn multiset(rows: &[Row]) -> HashMap<&Row, usize> {
    let mut m = HashMap::with_capacity(rows.len());
    for r in rows {
        *m.entry(r).or_insert(0) += 1;
    }
    m
}

/// Bag equality of result rows, or sequence equality when `order_sensitive`.
/// Column order is always significant.
pub fn compare_results(
    pred: &ExecutionOutcome,
    gold: &ExecutionOutcome,
    order_sensitive: bool,
) -> Result<bool, DbError> {
    if pred.is_error() || gold.is_error() {
        return Err(DbError::ComparisonOnError);
    }
    if pred.rows.len() != gold.rows.len() {
        return Ok(false);
    }
    if order_sensitive {
        Ok(pred.rows == gold.rows)
    } else {
        Ok(multiset(&pred.rows) == multiset(&gold.rows))
    }
}

/// Whether a `+1` execution reward is attainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Gold SQL is known: a matching result scores +1.
    #[default]
    Oracle,
    /// No gold: any successful execution scores 0.
    Blind,
}

impl std::str::FromStr for RewardMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(RewardMode::Oracle),
            "blind" => Ok(RewardMode::Blind),
            other => Err(format!("unknown reward mode {other:?} (expected oracle or blind)")),
        }
    }
}

/// Execution reward: −1 on failure, 0 on an empty or unmatched result,
/// +1 on a gold match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExecReward {
    Failed,
    Neutral,
    Matched,
}

impl ExecReward {
    pub fn value(self) -> i8 {
        match self {
            ExecReward::Failed => -1,
            ExecReward::Neutral => 0,
            ExecReward::Matched => 1,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            -1 => Some(ExecReward::Failed),
            0 => Some(ExecReward::Neutral),
            1 => Some(ExecReward::Matched),
            _ => None,
        }
    }
}

impl Serialize for ExecReward {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for ExecReward {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i8::deserialize(d)?;
        ExecReward::from_value(v).ok_or_else(|| serde::de::Error::custom(format!("execution reward {v} not in {{-1,0,1}}")))
    }
}

struct GoldResult {
    outcome: ExecutionOutcome,
    order_sensitive: bool,
}

/// Scores candidate SQL against one task. The gold result is executed once
/// and cached.
pub struct ExecutionJudge<'a> {
    env: &'a SqlEnv,
    mode: RewardMode,
    timeout: Duration,
    gold: Option<GoldResult>,
}

impl<'a> ExecutionJudge<'a> {
    pub fn new(env: &'a SqlEnv, gold_sql: Option<&str>, mode: RewardMode, timeout: Duration) -> Result<Self, DbError> {
        let gold = match (mode, gold_sql) {
            (RewardMode::Oracle, None) => return Err(DbError::MissingGold),
            (RewardMode::Oracle, Some(g)) => {
                let outcome = env.execute(g, timeout);
                if let Some(msg) = &outcome.error_message {
                    log::warn!("gold SQL fails on {}: {msg}", env.path().display());
                }
                Some(GoldResult {
                    outcome,
                    order_sensitive: has_top_level_order_by(g),
                })
            }
            (RewardMode::Blind, _) => None,
        };
        Ok(Self {
            env,
            mode,
            timeout,
            gold,
        })
    }

    pub fn mode(&self) -> RewardMode {
        self.mode
    }

    pub fn env(&self) -> &SqlEnv {
        self.env
    }

    pub fn reward(&self, pred_sql: &str) -> ExecReward {
        let pred = self.env.execute(pred_sql, self.timeout);
        self.reward_for(&pred)
    }

    pub fn reward_for(&self, pred: &ExecutionOutcome) -> ExecReward {
        match pred.status {
            ExecStatus::Error => ExecReward::Failed,
            ExecStatus::Empty => ExecReward::Neutral,
            ExecStatus::Rows => match &self.gold {
                Some(g) if compare_results(pred, &g.outcome, g.order_sensitive).unwrap_or(false) => ExecReward::Matched,
                _ => ExecReward::Neutral,
            },
        }
    }
}

/// One-shot execution reward for `pred_sql` on `db_path`.
pub fn execution_reward(
    db_path: &Path,
    pred_sql: &str,
    gold_sql: Option<&str>,
    mode: RewardMode,
) -> Result<ExecReward, DbError> {
    if mode == RewardMode::Oracle && gold_sql.is_none() {
        return Err(DbError::MissingGold);
    }
    let env = match SqlEnv::open(db_path) {
        Ok(env) => env,
        Err(e @ DbError::FileNotFound(_)) => return Err(e),
        Err(_) => return Ok(ExecReward::Failed),
    };
    let judge = ExecutionJudge::new(&env, gold_sql, mode, Duration::from_millis(DEFAULT_TIMEOUT_MS))?;
    Ok(judge.reward(pred_sql))
}
